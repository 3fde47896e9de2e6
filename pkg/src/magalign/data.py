"""Multimodal attributed graph data: file I/O, splits, synthetic graphs, edge controls."""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import as_dense, l2_normalize_rows, make_rng

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}

MAGIC = b"MAGF"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class RewireError(RuntimeError):
    def __init__(self, mode: str, msg: str):
        super().__init__(f"{mode}: {msg}")
        self.mode = mode


@dataclass(frozen=True)
class SplitConfig:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 43

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if min(fr) <= 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be positive and sum to 1, got {fr}")


@dataclass(frozen=True)
class SynthConfig:
    n: int = 500
    classes: int = 8
    dim: int = 32
    p_in: float = 0.15
    p_out: float = 0.004
    sigma_v: float = 0.8
    sigma_t: float = 0.8
    theta: float = math.pi / 4
    content: float = 0.0
    homophily: float = 0.0
    seed: int = 43

    def __post_init__(self):
        if self.content < 0:
            raise DataError("content scale must be non-negative")
        if self.homophily < 0:
            raise DataError("homophily must be non-negative")
        if not 0 <= self.p_out < self.p_in <= 1:
            raise DataError("need 0 <= p_out < p_in <= 1")
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if self.classes > self.n:
            raise DataError("more classes than nodes")
        if self.sigma_v < 0 or self.sigma_t < 0:
            raise DataError("noise scales must be non-negative")
        if self.dim < 1:
            raise DataError("dim must be positive")


@dataclass(frozen=True, eq=False)
class MagDataset:
    features_v: np.ndarray
    features_t: np.ndarray
    edges: np.ndarray  # (E, 2) sorted undirected pairs, i < j, lexicographic order
    split: np.ndarray  # per-node TRAIN / VAL / TEST code
    categories: np.ndarray | None = None
    edge_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.features_v.shape[0]
        if self.features_t.shape[0] != n:
            raise DataError(f"modality row counts differ: {n} vs {self.features_t.shape[0]}")
        if self.split.shape != (n,):
            raise DataError("split labels must cover every node")
        if self.categories is not None and self.categories.shape != (n,):
            raise DataError("category ids must cover every node")
        e = self.edges
        if e.ndim != 2 or e.shape[1] != 2:
            raise DataError("edges must be an (E, 2) array")
        if len(e):
            if e.min() < 0 or e.max() >= n:
                raise DataError("edge index out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise DataError("edges must be stored as sorted pairs without self-loops")
            if len(np.unique(e, axis=0)) != len(e):
                raise DataError("duplicate structural edge")

    @property
    def n(self) -> int:
        return self.features_v.shape[0]

    def nodes(self, which: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLIT_NAMES[which])

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def with_edges(self, edges: np.ndarray) -> "MagDataset":
        return replace(self, edges=canonical_edges(edges, self.n)[0])


def canonical_edges(pairs, n: int) -> tuple[np.ndarray, int, int]:
    """Sort each pair, drop self-loops and duplicates. Returns (edges, n_self, n_dup)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) and (pairs.min() < 0 or pairs.max() >= n):
        raise DataError("edge index out of range")
    loops = pairs[:, 0] == pairs[:, 1]
    kept = np.sort(pairs[~loops], axis=1)
    uniq = np.unique(kept, axis=0) if len(kept) else kept.reshape(0, 2)
    return uniq, int(loops.sum()), len(kept) - len(uniq)


def assign_split(n: int, cfg: SplitConfig) -> np.ndarray:
    """Fisher-Yates shuffle of node ids with the split seed, then contiguous slices."""
    rng = make_rng(cfg.seed)
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    n_train = int(round(n * cfg.train))
    n_val = int(round(n * cfg.val))
    labels = np.full(n, TEST, dtype=np.int8)
    labels[perm[:n_train]] = TRAIN
    labels[perm[n_train:n_train + n_val]] = VAL
    return labels


# --- feature files -------------------------------------------------------------

def write_features(m, path) -> None:
    m = as_dense(m)
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(m.astype("<f8", copy=False).tobytes(order="C"))


def read_features(path) -> np.ndarray:
    """Read a MAGF binary matrix, falling back to comma-separated text."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        return _read_csv(path)
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated MAGF header")
    _, version, rows, cols = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise DataError(f"{path}: unsupported MAGF version {version}")
    body = raw[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise DataError(f"{path}: header declares {rows}x{cols} but payload has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def _read_csv(path) -> np.ndarray:
    try:
        m = np.loadtxt(path, delimiter=",", dtype=np.float64, comments="#", ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: malformed feature file ({exc})") from exc
    return m


def feature_file_roundtrip(m, path) -> np.ndarray:
    write_features(m, path)
    return read_features(path)


def parse_edges(text: str, n: int) -> tuple[np.ndarray, int, int]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"edge line {lineno}: expected 'src dst', got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise DataError(f"edge line {lineno}: non-integer node id") from exc
        if not (0 <= a < n and 0 <= b < n):
            raise DataError(f"edge line {lineno}: node id out of range [0, {n})")
        pairs.append((a, b))
    return canonical_edges(pairs, n)


def write_edges(edges, path, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    lines += [f"{a} {b}" for a, b in np.asarray(edges)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(features_v, features_t, edges, split: SplitConfig, categories=None) -> MagDataset:
    xv = read_features(features_v)
    xt = read_features(features_t)
    if xv.shape[0] != xt.shape[0]:
        raise DataError(f"modality row counts differ: {xv.shape[0]} vs {xt.shape[0]}")
    n = xv.shape[0]
    e, n_self, n_dup = parse_edges(Path(edges).read_text(), n)
    if n_self or n_dup:
        log.info("edge list: dropped %d self-loops and %d duplicate edges", n_self, n_dup)
    cats = None
    if categories is not None:
        cats = np.array([int(x) for x in Path(categories).read_text().split()], dtype=np.int64)
        if len(cats) != n:
            raise DataError(f"category file has {len(cats)} entries, expected {n}")
    return MagDataset(xv, xt, e, assign_split(n, split), cats,
                      {"dropped_self_loops": n_self, "dropped_duplicates": n_dup})


# --- synthetic graphs ----------------------------------------------------------

def rotation(dim: int, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map turning every vector by exactly ``theta`` inside seeded 2-planes.

    Built as ``I + Q (B - I) Q^T`` so that ``theta == 0`` gives the identity bit-exactly.
    """
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q *= np.sign(np.diag(r))
    block = np.eye(dim)
    c, s = math.cos(theta), math.sin(theta)
    for k in range(0, dim - 1, 2):
        block[k:k + 2, k:k + 2] = [[c, -s], [s, c]]
    return np.eye(dim) + q @ (block - np.eye(dim)) @ q.T


def generate_synthetic(cfg: SynthConfig, split: SplitConfig | None = None) -> MagDataset:
    """Class prototypes plus optional per-node content, observed through two noisy views.

    The text view sees the clean signal through a rotation by ``theta``. With ``content > 0``
    each node carries a latent vector shared by both views. With ``homophily > 0`` pairs with
    similar latent directions are more likely to be linked: the probability of pair (i, j) is
    ``p_block * exp(homophily * cos(u_i, u_j)) / Z_block``, where ``Z_block`` is the mean weight
    over that block (same class or different class), clipped at 1. Edges stay independent and
    block densities stay close to ``p_in`` / ``p_out``. Both knobs at 0 give prototypes plus
    independent noise and a plain two-block random graph.
    """
    rng = make_rng(cfg.seed)
    n, d = cfg.n, cfg.dim
    cats = np.arange(n) % cfg.classes
    protos = rng.standard_normal((cfg.classes, d)) / math.sqrt(d)
    rot = rotation(d, cfg.theta, rng)
    latent = None
    if cfg.content > 0 or cfg.homophily > 0:
        latent = rng.standard_normal((n, d)) / math.sqrt(d)
    iu, ju = np.triu_indices(n, k=1)
    same = cats[iu] == cats[ju]
    p = np.where(same, cfg.p_in, cfg.p_out)
    if cfg.homophily > 0:
        u = l2_normalize_rows(latent)
        w = np.exp(cfg.homophily * np.einsum("ij,ij->i", u[iu], u[ju]))
        for block in (same, ~same):
            if block.any():
                w[block] /= w[block].mean()
        p = np.minimum(p * w, 1.0)
    keep = rng.random(len(iu)) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    clean = protos[cats]
    if cfg.content > 0:
        clean = clean + cfg.content * latent
    noise_v = rng.standard_normal((n, d)) / math.sqrt(d)
    noise_t = rng.standard_normal((n, d)) / math.sqrt(d)
    xv = clean + cfg.sigma_v * noise_v
    xt = clean @ rot.T + cfg.sigma_t * noise_t
    return MagDataset(xv, xt, edges, assign_split(n, split or SplitConfig()), cats)


# --- perturbation controls -----------------------------------------------------

def randomize_edges(ds: MagDataset, mode: str, rng: np.random.Generator, *, strict: bool = False) -> MagDataset:
    """Replace structural edges by a uniform random graph or a degree-preserving rewiring.

    ``degree_preserving_rewire`` targets ``10 * |E|`` accepted double-edge swaps within
    ``100 * |E|`` attempts. When the attempt cap runs out first, the partially rewired
    graph is returned (a warning is logged) unless ``strict`` is set, which raises.
    """
    edges = ds.edges
    m, n = len(edges), ds.n
    if mode == "uniform_random":
        if m > n * (n - 1) // 2:
            raise RewireError(mode, "more edges than distinct node pairs")
        seen: set[tuple[int, int]] = set()
        out = []
        while len(out) < m:
            a, b = (int(x) for x in rng.integers(0, n, size=2))
            if a == b:
                continue
            pair = (a, b) if a < b else (b, a)
            if pair in seen:
                continue
            seen.add(pair)
            out.append(pair)
        return ds.with_edges(np.array(out, dtype=np.int64).reshape(-1, 2))
    if mode == "degree_preserving_rewire":
        if m < 2:
            raise RewireError(mode, "need at least 2 edges to rewire")
        cur = [tuple(map(int, e)) for e in edges]
        present = set(cur)
        target, cap = 10 * m, 100 * m
        accepted = attempts = 0
        while accepted < target and attempts < cap:
            attempts += 1
            x, y = rng.integers(0, m, size=2)
            if x == y:
                continue
            a, b = cur[x]
            c, d = cur[y]
            if rng.random() < 0.5:
                c, d = d, c
            # (a,b),(c,d) -> (a,d),(c,b)
            if a == d or c == b:
                continue
            e1 = (a, d) if a < d else (d, a)
            e2 = (c, b) if c < b else (b, c)
            if e1 == e2 or e1 in present or e2 in present:
                continue
            present.difference_update((cur[x], cur[y]))
            present.update((e1, e2))
            cur[x], cur[y] = e1, e2
            accepted += 1
        if accepted < target:
            if strict:
                raise RewireError(mode, f"only {accepted} of {target} swaps accepted in {cap} attempts")
            log.warning("%s: only %d of %d swaps accepted", mode, accepted, target)
        return ds.with_edges(np.array(cur, dtype=np.int64))
    raise ValueError(f"unknown randomization mode {mode!r}")
