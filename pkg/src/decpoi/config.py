"""Experiment configuration: defaults, key-value config files, hashing.

One flat key=value file configures every pipeline stage; the synthetic
generator reads its own subset of the keys. Artifacts embed the config
hash so stages refuse to chain across mismatched configurations.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .data import SynthConfig
from .exceptions import ConfigError

ABLATION_TOKENS = ("CP", "DP", "AN", "GN", "SN", "MIM", "PP")


@dataclass
class ExperimentConfig:
    """All protocol hyperparameters; defaults follow the full-scale setup."""

    d: int = 32                  # latent dimension
    q: int = 30                  # neighbor count per kind
    mu: float = 0.3              # own-vs-neighbors proportion in aggregation
    epsilon: float = 0.1         # privacy budget
    lr: float = 0.002
    dropout: float = 0.2
    batch: int = 16
    max_epochs: int = 50
    n_neg: int = 5               # negatives per positive in the POI loss
    n_cp: int = 5                # negatives in the category loss
    n_comb: int = 5              # negatives per side in the fusion loss
    n_cand: int = 200            # unvisited candidates at evaluation
    seq_cap: int = 200
    threshold_km: float = 10.0   # centroid coverage threshold
    mim_steps: int = 5
    conv_tol: float = 1e-4       # <=0 disables early stopping
    centroid_floor: float = 0.01
    pretrain_epochs: int = 20
    pretrain_lr: float = 3.0
    pretrain_lr_cp: float | None = 24.0   # None = use pretrain_lr
    pretrain_batch: int = 256
    pretrain_tol: float = 1e-4
    filter_min_user: int = 0     # 0 = skip sparsity filtering
    filter_min_poi: int = 0
    workers: int = 1             # parallelism degree; never affects results
    seed: int = 0
    ablations: tuple = ()

    def __post_init__(self):
        bad = [a for a in self.ablations if a not in ABLATION_TOKENS]
        if bad:
            raise ConfigError(f"unknown ablation flags: {bad} (known: {ABLATION_TOKENS})")
        self.ablations = tuple(sorted(set(self.ablations)))
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("mu must lie in [0, 1]")
        if self.privacy_enabled and self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")

    @property
    def privacy_enabled(self) -> bool:
        return "PP" not in self.ablations

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ablations"] = ",".join(self.ablations)
        return d

    def config_hash(self) -> str:
        """Short digest over every result-relevant key (workers excluded)."""
        items = sorted((k, v) for k, v in self.to_dict().items() if k != "workers")
        blob = "\n".join(f"{k}={_canon(v)}" for k, v in items)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def combined_hash(exp: "ExperimentConfig", synth: SynthConfig) -> str:
    """Digest covering the experiment and data-generation keys together."""
    items = sorted((k, v) for k, v in exp.to_dict().items() if k != "workers")
    items += sorted((k, getattr(synth, k)) for k in SynthConfig.field_names)
    blob = "\n".join(f"{k}={_canon(v)}" for k, v in items)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _canon(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_ablations(raw: str) -> tuple:
    tokens = []
    for part in raw.replace(";", ",").split(","):
        token = part.strip().lstrip("-").upper()
        if token:
            tokens.append(token)
    return tuple(tokens)


_EXP_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}
_SYNTH_FIELDS = set(SynthConfig.field_names) - {"seed"}


def read_config_file(path) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = raw.strip()
    return values


def _coerce(key: str, raw: str):
    if key == "ablations":
        return parse_ablations(raw)
    if raw.lower() in ("none", "null"):
        return None
    for caster in (int, float):
        try:
            value = caster(raw)
        except ValueError:
            continue
        if caster is int and any(c in raw for c in ".eE"):
            continue
        return value
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def configs_from_values(values: dict, overrides: dict | None = None):
    """(ExperimentConfig, SynthConfig) from a flat key->string mapping."""
    merged = dict(values)
    merged.update(overrides or {})
    exp_kw, synth_kw = {}, {}
    for key, raw in merged.items():
        value = _coerce(key, raw) if isinstance(raw, str) else raw
        if key in _EXP_FIELDS:
            exp_kw[key] = value
        elif key in _SYNTH_FIELDS:
            synth_kw[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    exp = ExperimentConfig(**exp_kw)
    synth = SynthConfig(seed=exp.seed, **synth_kw)
    return exp, synth


def load_configs(path, overrides: dict | None = None):
    return configs_from_values(read_config_file(path), overrides)
