"""Run configuration: a versioned JSON document with strict key checking."""

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass

from .datasets import GenConfig
from .errors import ConfigError
from .losses import LossWeights

SCHEMA_VERSION = 1
SEED_ENV = "UDS_SEED"


@dataclass
class ModelConfig:
    hidden: tuple = (8,)
    slope: float = 0.01


@dataclass
class TrainSection:
    # None means M <- estimated manifold dimension
    n_models: int = None
    lr: float = 0.002
    batch_size: int = 256
    n_updates: int = 10000
    eps_tr: float = 0.3
    eps_val: float = 0.3
    shared_init: bool = False


@dataclass
class ManifoldConfig:
    kind: str = "pca"
    # None means n_components <- estimated dimension
    n_components: int = None
    k_neighbors: int = 20
    ae_hidden: tuple = (128, 128)
    ae_variational: bool = True
    ae_kl_weight: float = 0.01
    ae_epochs: int = 100
    ae_batch_size: int = 256
    ae_lr: float = 0.001


@dataclass
class FinetuneSection:
    n_updates: int = 2000
    lr: float = 0.002
    batch_size: int = 256
    from_scratch: bool = False


@dataclass
class DistillSection:
    enabled: bool = True
    max_combinations: int = 5
    n_select: int = 500
    n_updates: int = 2000
    from_scratch: bool = True


@dataclass
class EvalSection:
    delta: float = 0.2
    n_diag: int = 200


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)
    manifold: ManifoldConfig = field(default_factory=ManifoldConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    distill: DistillSection = field(default_factory=DistillSection)
    evaluate: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {self.schema_version}")
        self.data.seed = self.seed
        self.data.validate()
        self.loss.validate()
        if not self.model.hidden or any(int(h) < 1 for h in self.model.hidden):
            raise ConfigError("model.hidden", "need at least one positive width")
        if not 0 < self.model.slope < 1:
            raise ConfigError("model.slope", "must be in (0, 1)")
        if self.train.n_models is not None and self.train.n_models < 1:
            raise ConfigError("train.n_models", "must be >= 1")
        if self.manifold.kind not in ("pca", "ae"):
            raise ConfigError("manifold.kind", f"must be 'pca' or 'ae', got {self.manifold.kind!r}")
        if self.manifold.n_components is not None and self.manifold.n_components < 1:
            raise ConfigError("manifold.n_components", "must be >= 1")
        if self.manifold.k_neighbors < 2:
            raise ConfigError("manifold.k_neighbors", "must be >= 2")
        for name in ("n_updates", "batch_size"):
            if getattr(self.train, name) < (0 if name == "n_updates" else 1):
                raise ConfigError(f"train.{name}", "out of range")
        if self.finetune.n_updates < 0 or self.distill.n_updates < 0:
            raise ConfigError("finetune.n_updates", "must be >= 0")
        if self.distill.max_combinations < 1:
            raise ConfigError("distill.max_combinations", "must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["data"] = self.data.to_dict()
        d["data"].pop("seed")
        return _lists(d)


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(where or "config", "expected a JSON object")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{where}.{key}" if where else key, "unknown key")
    kwargs = {}
    for name, f in known.items():
        path = f"{where}.{name}" if where else name
        if name not in raw:
            continue
        value = raw[name]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            value = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(path, "expected a list")
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(where or "config", str(err)) from err


def config_from_dict(raw, env=None):
    """Build and validate a :class:`RunConfig`; ``UDS_SEED`` in ``env`` overrides the seed."""
    if "seed" in raw.get("data", {}) if isinstance(raw, dict) else False:
        raise ConfigError("data.seed", "unknown key (use the top-level seed)")
    cfg = _build(RunConfig, raw, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as err:
            raise ConfigError(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from err
    return cfg.validate()


def load_config(path, env=None):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError("config", f"{path}: invalid JSON ({err})") from err
    return config_from_dict(raw, env)
