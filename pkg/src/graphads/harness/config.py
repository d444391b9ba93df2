"""Flat key=value run configuration.

One namespace covers data generation, model architecture, training and
evaluation so a single file reproduces a whole run.  Unknown keys are
rejected rather than ignored; a typo should fail loudly, not silently
train the wrong model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..dualenc import POOL_MEAN, EncoderConfig, check_config
from ..errors import ConfigError
from ..gatprop import GatConfig, check_gat_config
from ..synthgen import ClickModel, WorldConfig, check_click_model
from ..align import LossWeights, check_weights

ARM_FULL = "full"
ARM_ENCODER_ONLY = "encoder_only"
ARM_GAT_ONLY = "gat_only"
ARMS = (ARM_FULL, ARM_ENCODER_ONLY, ARM_GAT_ONLY)


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "out"
    # run identity
    arm: str = ARM_FULL
    seed: int = 42
    # training
    epochs: int = 30
    batch_size: int = 32
    patience: int = 5
    lr: float = 1e-4
    weight_decay: float = 0.01
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    # text pipeline
    num_merges: int = 200
    max_len: int = 12
    # encoder
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    d_ff: int = 64
    pooling: str = POOL_MEAN
    # one shared multilingual tower: queries and ads meet in a single token
    # embedding space, which is what lets translation alignment carry over
    # to retrieval
    tie_encoders: bool = True
    # graph attention
    gat_layers: int = 2
    gat_nonlinearity: str = "ELU"
    include_self: bool = True
    use_edge_weights: bool = True
    include_impressions: bool = False
    impression_weight: float = 0.1
    # loss
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    # inference
    refine_test_queries: bool = True
    eval_impressions: int = 20000
    # synthetic world (gen-data); sized so a full default run stays in
    # single-digit minutes on one CPU core
    n_langs: int = 2
    n_concepts: int = 200
    rho: float = 0.2
    n_ads: int = 400
    n_users: int = 120
    n_sessions: int = 800
    p_match: float = 0.35
    p_mismatch: float = 0.05
    q_match: float = 0.25
    q_mismatch: float = 0.02


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") \
            from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got "
                              f"{stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = _parse_value(key, raw)
    config = dataclasses.replace(base or RunConfig(), **overrides)
    validate_config(config)
    return config


def load_run_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base=base)


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def validate_config(config: RunConfig) -> None:
    if config.arm not in ARMS:
        raise ConfigError(f"arm must be one of {ARMS}, got {config.arm!r}")
    if config.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {config.epochs}")
    if config.patience < 1:
        raise ConfigError(f"patience must be >= 1, got {config.patience}")
    if config.batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for in-batch negatives, "
                          f"got {config.batch_size}")
    if config.lr <= 0:
        raise ConfigError(f"lr must be positive, got {config.lr}")
    if config.weight_decay < 0:
        raise ConfigError(f"weight_decay must be >= 0, got "
                          f"{config.weight_decay}")
    if config.eval_impressions < 1:
        raise ConfigError(f"eval_impressions must be >= 1, got "
                          f"{config.eval_impressions}")
    fracs = (config.train_frac, config.val_frac, config.test_frac)
    if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got "
                          f"{fracs}")
    if config.train_frac <= 0:
        raise ConfigError("train_frac must be positive")
    check_weights(loss_weights(config))
    check_click_model(click_model(config))
    check_gat_config(gat_config(config))
    # vocab size is data-dependent; validate the rest of the encoder shape
    check_config(encoder_config(config, vocab_size=8))


def encoder_config(config: RunConfig, vocab_size: int) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, d_model=config.d_model,
                         n_heads=config.n_heads, n_layers=config.enc_layers,
                         d_ff=config.d_ff, max_len=config.max_len,
                         pooling=config.pooling,
                         tie_encoders=config.tie_encoders)


def gat_config(config: RunConfig) -> GatConfig:
    return GatConfig(n_layers=config.gat_layers, d_in=config.d_model,
                     d_out=config.d_model,
                     nonlinearity=config.gat_nonlinearity,
                     include_self=config.include_self,
                     use_edge_weights=config.use_edge_weights)


def loss_weights(config: RunConfig) -> LossWeights:
    # free-embedding runs have no encoder to embed reference translations
    lambda2 = 0.0 if config.arm == ARM_GAT_ONLY else config.lambda2
    return LossWeights(tau=config.tau, lambda1=config.lambda1,
                       lambda2=lambda2)


def world_config(config: RunConfig) -> WorldConfig:
    return WorldConfig(n_langs=config.n_langs, n_concepts=config.n_concepts,
                       rho=config.rho, n_ads=config.n_ads,
                       click_model=click_model(config))


def click_model(config: RunConfig) -> ClickModel:
    return ClickModel(p_match=config.p_match, p_mismatch=config.p_mismatch,
                      q_match=config.q_match, q_mismatch=config.q_mismatch)
