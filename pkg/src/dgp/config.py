"""Flat key=value experiment configuration.

One file drives every subcommand.  Lines are `key = value`; `#` starts a
comment; blank lines are ignored.  Unknown keys are rejected so typos
fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from .pretrain import AttrMask, EdgePerturb, NodeDrop, PretrainConfig, SubgraphSample
from .prompting import DgpConfig


class ConfigError(ValueError):
    """The config file is malformed or inconsistent."""


PAPER_GRID_LAMBDA = [0.1, 0.5, 1.0, 5.0, 10.0]
PAPER_GRID_GAMMA = [0.1, 0.5, 1.0, 5.0, 10.0]
PAPER_GRID_ALPHA = [1e2, 1e3, 1e4, 1e5]


@dataclass
class ExperimentConfig:
    # data sources: each side is either synthetic or a dataset directory
    id_source: str = "synth"  # "synth" | "tu"
    id_dir: str = ""
    id_name: str = ""
    ood_source: str = "synth"
    ood_dir: str = ""
    ood_name: str = ""
    # synthetic generator knobs
    synth_classes: int = 2
    synth_per_class: int = 150
    synth_motif_count: int = 2
    synth_extra_nodes: int = 10
    synth_jitter: int = 3
    synth_bg_density: float = 0.08
    ood_count: int = 0  # 0 means "just enough for the split"
    ood_nodes: int = 16
    ood_jitter: int = 3
    ood_density: float = 0.0  # 0 means "twice the measured ID density"
    # featurization
    featurizer: str = "degree"  # "degree" | "native"
    max_degree: int = 32
    # encoder architecture
    hidden_dims: tuple = (32, 32, 32)
    proj_hidden: int = 96
    embed_dim: int = 96
    readout: str = "sum"
    # pre-training
    pretrain_method: str = "graphcl"  # "graphcl" | "simgrace" | "none"
    pretrain_epochs: int = 20
    pretrain_batch: int = 128
    pretrain_lr: float = 0.01
    pretrain_tau: float = 0.2
    pretrain_eta: float = 1.0
    pretrain_aug1: str = "node_drop:0.1"
    pretrain_aug2: str = "node_drop:0.1"
    # prompt training
    dgp_lambda: float = 1.0
    dgp_gamma: float = 1.0
    dgp_alpha1: float = 100.0
    dgp_alpha2: float = 100.0
    dgp_lr: float = 0.01
    dgp_epochs: int = 100
    dgp_batch: int = 128
    dgp_patience: int = 0  # 0 disables early stopping
    distance_stats: str = "prompted"
    # scoring
    scorer_q: int = 1
    scorer_eps_reg: float = 1e-3
    # grid search (comma-separated lists)
    grid_lambda: list = field(default_factory=lambda: list(PAPER_GRID_LAMBDA))
    grid_gamma: list = field(default_factory=lambda: list(PAPER_GRID_GAMMA))
    grid_alpha1: list = field(default_factory=lambda: list(PAPER_GRID_ALPHA))
    grid_alpha2: list = field(default_factory=lambda: list(PAPER_GRID_ALPHA))
    # run control
    seed: int = 0
    out: str = "out"
    # stand-alone command inputs
    encoder_path: str = ""
    model_path: str = ""
    data_dir: str = ""
    data_name: str = ""
    data_origin: str = "ID"
    score_csv: str = ""


def _parse_value(name, text, kind):
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind is list:
            return [float(t) for t in text.split(",") if t.strip()]
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    # field annotations are strings here, so take each key's type from its
    # default value instead
    defaults = ExperimentConfig()
    kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(ExperimentConfig)}
    values = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {raw.strip()!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        values[key] = _parse_value(key, val, kinds[key])
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _validate(cfg: ExperimentConfig):
    for side, source, d, n in (
        ("id", cfg.id_source, cfg.id_dir, cfg.id_name),
        ("ood", cfg.ood_source, cfg.ood_dir, cfg.ood_name),
    ):
        if source not in ("synth", "tu"):
            raise ConfigError(f"{side}_source must be 'synth' or 'tu', got {source!r}")
        if source == "tu" and (not d or not n):
            raise ConfigError(f"{side}_source=tu requires {side}_dir and {side}_name")
        if source == "synth" and (d or n):
            raise ConfigError(f"{side}_source=synth conflicts with {side}_dir/{side}_name")
    if cfg.featurizer not in ("degree", "native"):
        raise ConfigError(f"featurizer must be 'degree' or 'native', got {cfg.featurizer!r}")
    if cfg.pretrain_method not in ("graphcl", "simgrace", "none"):
        raise ConfigError(f"unknown pretrain_method {cfg.pretrain_method!r}")
    if cfg.readout not in ("sum", "mean"):
        raise ConfigError(f"readout must be 'sum' or 'mean', got {cfg.readout!r}")
    if cfg.distance_stats not in ("prompted", "unprompted"):
        raise ConfigError(f"unknown distance_stats {cfg.distance_stats!r}")
    if not 1e-4 <= cfg.dgp_lr <= 1e-1:
        raise ConfigError(f"dgp_lr must lie in [1e-4, 1e-1], got {cfg.dgp_lr}")


def parse_augmentation(text: str):
    """'node_drop:0.1' | 'edge_perturb:0.1' | 'attr_mask:0.1' | 'subgraph:0.8'."""
    name, _, arg = text.partition(":")
    try:
        value = float(arg) if arg else None
    except ValueError:
        raise ConfigError(f"bad augmentation parameter in {text!r}") from None
    table = {
        "node_drop": (NodeDrop, 0.1),
        "edge_perturb": (EdgePerturb, 0.1),
        "attr_mask": (AttrMask, 0.1),
        "subgraph": (SubgraphSample, 0.8),
    }
    if name not in table:
        raise ConfigError(f"unknown augmentation {name!r}")
    cls, default = table[name]
    return cls(value if value is not None else default)


def pretrain_config(cfg: ExperimentConfig, seed: int) -> PretrainConfig:
    return PretrainConfig(
        method=cfg.pretrain_method,
        epochs=cfg.pretrain_epochs,
        batch_size=cfg.pretrain_batch,
        lr=cfg.pretrain_lr,
        tau=cfg.pretrain_tau,
        eta=cfg.pretrain_eta,
        aug1=parse_augmentation(cfg.pretrain_aug1),
        aug2=parse_augmentation(cfg.pretrain_aug2),
        seed=seed,
        hidden_dims=tuple(cfg.hidden_dims),
        proj_hidden=cfg.proj_hidden,
        embed_dim=cfg.embed_dim,
        readout_mode=cfg.readout,
    )


def dgp_config(cfg: ExperimentConfig, seed: int, **overrides) -> DgpConfig:
    base = dict(
        lam=cfg.dgp_lambda,
        gamma=cfg.dgp_gamma,
        alpha1=cfg.dgp_alpha1,
        alpha2=cfg.dgp_alpha2,
        lr=cfg.dgp_lr,
        epochs=cfg.dgp_epochs,
        batch_size=cfg.dgp_batch,
        seed=seed,
        q=cfg.scorer_q,
        eps_reg=cfg.scorer_eps_reg,
        distance_stats=cfg.distance_stats,
        early_stop_patience=cfg.dgp_patience or None,
    )
    base.update(overrides)
    return DgpConfig(**base)
