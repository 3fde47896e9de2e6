"""Run configuration: TOML sections mapped onto dataclasses, dotted overrides, validation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .data import SplitConfig, SynthConfig
from .model import ModelConfig
from .objective import LossWeights
from .readout import ReadoutConfig
from .smoothing import DENSE_SOLVE_MAX_N, SmoothingConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, problems: list):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class DatasetSection:
    source: str = "synthetic"  # or "files"
    features_v: str = ""
    features_t: str = ""
    edges: str = ""
    categories: str = ""


@dataclass
class SyntheticSection:
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


@dataclass
class SplitSection:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 43


@dataclass
class CandidateSection:
    mode: str = "hybrid"
    k_intra: int = 10
    k_cross: int = 10
    knn_features: str = "frozen"  # or "adapted" (initial adapter output)


@dataclass
class SmoothingSection:
    depth: int = 4
    beta: float = 0.4
    alpha: float = 0.2
    normalize_each_step: bool = True


@dataclass
class ReadoutSection:
    rho: float = 0.7
    width: int = 16


@dataclass
class ModelSection:
    embed_dim: int = 32
    scorer_hidden: int = 32


@dataclass
class LossSection:
    cde: float = 0.1
    topo: float = 0.05
    direct: float = 0.3
    gamma: float = 1.0
    temperature: float = 0.07
    negatives: int = 5
    cde_reduction: str = "mean"


@dataclass
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 60
    warmup: int = 5
    metric: str = "r10"
    seed: int = 43
    patience: int = 15


@dataclass
class AblationSection:
    no_cross_modal: bool = False
    no_restart: bool = False
    uniform_readout: bool = False
    uniform_operators: bool = False


@dataclass
class ControlSection:
    randomize_edges: str = "none"  # none | uniform_random | degree_preserving_rewire
    allow_self_pair_edges: bool = False
    only_self_pair_edges: bool = False
    adapter_only: bool = False


@dataclass
class EvalSection:
    full_gallery: bool = False


@dataclass
class DiagnosticsSection:
    k: int = 10
    depths: list = field(default_factory=lambda: list(range(13)))
    sim_quantile: float = 0.25
    support_quantile: float = 0.75


@dataclass
class OraclesSection:
    n: int = 32
    dim: int = 4
    alphas: list = field(default_factory=lambda: [0.1, 0.3, 0.5])
    betas: list = field(default_factory=lambda: [0.1, 0.25, 0.4])
    trials: int = 20
    gap_steps: int = 20
    collapse_steps: int = 100
    seed: int = 0


@dataclass
class SweepSection:
    parameter: str = "smoothing.depth"
    values: list = field(default_factory=lambda: [0, 1, 2, 4, 8])


@dataclass
class MultiseedSection:
    seeds: list = field(default_factory=lambda: [43, 44, 45])


SECTIONS = {
    "dataset": DatasetSection, "synthetic": SyntheticSection, "split": SplitSection,
    "candidates": CandidateSection, "smoothing": SmoothingSection, "readout": ReadoutSection,
    "model": ModelSection, "loss": LossSection, "train": TrainSection, "ablation": AblationSection,
    "control": ControlSection, "eval": EvalSection, "diagnostics": DiagnosticsSection,
    "oracles": OraclesSection, "sweep": SweepSection, "multiseed": MultiseedSection,
}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    split: SplitSection = field(default_factory=SplitSection)
    candidates: CandidateSection = field(default_factory=CandidateSection)
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    readout: ReadoutSection = field(default_factory=ReadoutSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    control: ControlSection = field(default_factory=ControlSection)
    eval: EvalSection = field(default_factory=EvalSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    oracles: OraclesSection = field(default_factory=OraclesSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    multiseed: MultiseedSection = field(default_factory=MultiseedSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    # --- derived library configs ---------------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**asdict(self.synthetic))

    def split_config(self) -> SplitConfig:
        return SplitConfig(**asdict(self.split))

    def model_config(self) -> ModelConfig:
        ab = self.ablation
        sm = SmoothingConfig(self.smoothing.depth, 0.0 if ab.no_cross_modal else self.smoothing.beta,
                             0.0 if ab.no_restart else self.smoothing.alpha, self.smoothing.normalize_each_step)
        ro = ReadoutConfig(self.readout.rho, self.readout.width, adaptive=not ab.uniform_readout)
        return ModelConfig(self.model.embed_dim, self.model.scorer_hidden, sm, ro,
                           learn_topology=not ab.uniform_operators, propagate=not self.control.adapter_only)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**asdict(self.loss))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train))

    @property
    def protocol(self) -> str:
        c = self.control
        return "control-only" if (c.allow_self_pair_edges or c.only_self_pair_edges) else "in-protocol"


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError([f"{where}: expected a boolean, got {value!r}"])
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError([f"{where}: expected an integer, got {value!r}"])
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError([f"{where}: expected an integer, got {value!r}"]) from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError([f"{where}: expected a number, got {value!r}"]) from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = tomli.loads(f"x = {value}")["x"]
        if not isinstance(value, list):
            raise ConfigError([f"{where}: expected a list, got {value!r}"])
        return value
    return str(value)


def _apply(cfg: RunConfig, section: str, key: str, value, problems: list) -> None:
    if section not in SECTIONS:
        problems.append(f"unknown section [{section}]")
        return
    sec = getattr(cfg, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        problems.append(f"unknown key {section}.{key}")
        return
    try:
        setattr(sec, key, _coerce(value, getattr(sec, key), f"{section}.{key}"))
    except ConfigError as exc:
        problems.extend(exc.problems)


def parse_override(text: str):
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    if key.count(".") != 1:
        raise ConfigError([f"override key {key!r} must be section.key"])
    try:
        value = tomli.loads(f"x = {raw}")["x"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    section, name = key.split(".")
    return section, name, value


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    problems: list = []
    base = Path(path).parent if path else Path(".")
    if path is not None:
        try:
            data = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from None
        for section, body in data.items():
            if not isinstance(body, dict):
                problems.append(f"top-level key {section!r} must be a [section]")
                continue
            for key, value in body.items():
                _apply(cfg, section, key, value, problems)
    for text in overrides:
        try:
            section, key, value = parse_override(text)
        except ConfigError as exc:
            problems.extend(exc.problems)
            continue
        _apply(cfg, section, key, value, problems)
    ds = cfg.dataset
    for key in ("features_v", "features_t", "edges", "categories"):
        p = getattr(ds, key)
        if p and not Path(p).is_absolute():
            setattr(ds, key, str((base / p).resolve()))
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> list:
    """Every violated field, as human-readable messages."""
    problems = []
    builders = (("synthetic", cfg.synth_config), ("split", cfg.split_config), ("smoothing/readout/model", cfg.model_config),
                ("loss", cfg.loss_weights), ("train", cfg.train_config))
    for name, build in builders:
        if name == "synthetic" and cfg.dataset.source != "synthetic":
            continue
        try:
            build()
        except (ValueError, TypeError) as exc:
            problems.append(f"[{name}] {exc}")
    if cfg.dataset.source not in ("synthetic", "files"):
        problems.append("dataset.source must be 'synthetic' or 'files'")
    if cfg.dataset.source == "files":
        for key in ("features_v", "features_t", "edges"):
            if not getattr(cfg.dataset, key):
                problems.append(f"dataset.{key} is required when dataset.source = 'files'")
    if cfg.candidates.mode not in ("hybrid", "structure_only"):
        problems.append("candidates.mode must be 'hybrid' or 'structure_only'")
    if cfg.candidates.knn_features not in ("frozen", "adapted"):
        problems.append("candidates.knn_features must be 'frozen' or 'adapted'")
    if cfg.candidates.k_intra < 0 or cfg.candidates.k_cross < 0:
        problems.append("candidates.k_intra and candidates.k_cross must be >= 0")
    c, ab = cfg.control, cfg.ablation
    if c.randomize_edges not in ("none", "uniform_random", "degree_preserving_rewire"):
        problems.append("control.randomize_edges must be none, uniform_random or degree_preserving_rewire")
    if c.allow_self_pair_edges and c.only_self_pair_edges:
        problems.append("control.allow_self_pair_edges and control.only_self_pair_edges are mutually exclusive")
    if c.adapter_only and any(asdict(ab).values()):
        problems.append("control.adapter_only disables propagation; ablation switches would have no effect")
    if c.adapter_only and (c.allow_self_pair_edges or c.only_self_pair_edges):
        problems.append("control.adapter_only never passes messages, so self-pair controls are meaningless")
    if ab.no_cross_modal and (c.allow_self_pair_edges or c.only_self_pair_edges):
        problems.append("ablation.no_cross_modal zeroes cross-modal messages, so self-pair controls are meaningless")
    if not 2 <= cfg.oracles.n <= DENSE_SOLVE_MAX_N:
        problems.append(f"oracles.n must lie in [2, {DENSE_SOLVE_MAX_N}] (dense-solve guard)")
    if any(not 0 < a <= 1 for a in cfg.oracles.alphas):
        problems.append("oracles.alphas must lie in (0, 1]")
    if cfg.diagnostics.k < 1:
        problems.append("diagnostics.k must be >= 1")
    if not cfg.multiseed.seeds:
        problems.append("multiseed.seeds must not be empty")
    return problems


def section_field_names() -> dict:
    return {name: [f.name for f in dataclasses.fields(cls)] for name, cls in SECTIONS.items()}
