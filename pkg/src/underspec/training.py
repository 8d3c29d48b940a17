"""Joint training of M models under the batch objective."""

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import MlpParams, MlpSpec, bce_with_logits, check_params, forward, init_params
from .datasets import apply_mask
from .errors import BadMagic, ConfigError, DimensionMismatch, NumericalError, ShapeError
from .losses import LossWeights, objective
from .manifold import _Reader
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_models: int = 8
    spec: MlpSpec = None
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.002
    batch_size: int = 256
    n_updates: int = 10000
    seed: int = 0
    eps_tr: float = 0.3
    eps_val: float = 0.3
    eval_every: int = 0
    shared_init: bool = False
    workers: int = 1

    def validate(self):
        if self.n_models < 1:
            raise ConfigError("n_models", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.n_updates < 0:
            raise ConfigError("n_updates", "must be >= 0")
        if not (self.eps_tr > 0 and self.eps_val > 0):
            raise ConfigError("eps_tr", "convergence thresholds must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr", "must be > 0")
        if self.spec is None:
            raise ConfigError("spec", "missing model spec")
        self.weights.validate()


@dataclass
class ModelSet:
    spec: MlpSpec
    params: list

    def __post_init__(self):
        for p in self.params:
            check_params(self.spec, p)

    def __len__(self):
        return len(self.params)

    def __getitem__(self, i):
        return self.params[i]

    def logits(self, x):
        return np.array([forward(self.spec, p, x)[0] for p in self.params])


@dataclass
class ConvergenceLog:
    """Rows of ``(model, epoch, update, train_loss, val_loss)``."""

    rows: list = field(default_factory=list)
    zero_grad_events: int = 0

    def record(self, epoch, update, train_losses, val_losses):
        for m, (tr, va) in enumerate(zip(train_losses, val_losses)):
            self.rows.append((m, epoch, update, float(tr), float(va)))

    def final(self):
        """Last recorded ``(train_loss, val_loss)`` per model."""
        last = {}
        for m, _, _, tr, va in self.rows:
            last[m] = (tr, va)
        return [last[m] for m in sorted(last)]

    def first(self):
        first = {}
        for m, _, _, tr, va in self.rows:
            first.setdefault(m, (tr, va))
        return [first[m] for m in sorted(first)]

    def converged(self, eps_tr, eps_val):
        return [m for m, (tr, va) in enumerate(self.final()) if tr < eps_tr and va < eps_val]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "epoch", "update", "train_loss", "val_loss"])
            for m, e, u, tr, va in self.rows:
                w.writerow([m, e, u, repr(tr), repr(va)])

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.rows.append((int(row["model"]), int(row["epoch"]), int(row["update"]),
                                 float(row["train_loss"]), float(row["val_loss"])))
        return out


def predictive_losses(spec, params_list, batch):
    """Mean BCE of every model on a labeled batch."""
    return [float(bce_with_logits(forward(spec, p, batch.inputs)[0], batch.labels).mean())
            for p in params_list]


def init_models(spec, n_models, seed, shared_init=False):
    seeds = np.random.SeedSequence(seed).spawn(1 if shared_init else n_models)
    if shared_init:
        seeds = seeds * n_models
    return [init_params(spec, np.random.default_rng(s)) for s in seeds]


def _dropout_inputs(x, rate, n_models, rng):
    keep = 1.0 - rate
    return [x * (rng.random(x.shape) < keep) / keep for _ in range(n_models)]


def train_models(cfg, train, val, manifold=None, init=None, input_masks=None):
    """Train ``cfg.n_models`` models jointly with Adam on shared minibatches.

    ``train`` and ``val`` are :class:`~underspec.datasets.Batch` objects.
    ``init`` optionally supplies starting parameters. ``input_masks`` (n, d_in)
    marks the training elements to keep; the rest are refilled from other
    rows of each minibatch. Returns
    ``(ModelSet, ConvergenceLog)``.
    """
    cfg.validate()
    spec = cfg.spec
    if manifold is not None and manifold.d_in != spec.d_in:
        raise ShapeError(f"manifold has d_in={manifold.d_in}, models have {spec.d_in}")
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    params = [p.copy() for p in init] if init is not None else init_models(
        spec, cfg.n_models, cfg.seed, cfg.shared_init)
    if len(params) != cfg.n_models:
        raise ConfigError("n_models", f"got {len(params)} initial models for n_models={cfg.n_models}")
    states = [AdamState.init(p, lr=cfg.lr) for p in params]
    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    mask_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    if input_masks is not None:
        input_masks = np.asarray(input_masks, dtype=bool)
        if input_masks.shape != train.inputs.shape:
            raise ShapeError(f"mask shape {input_masks.shape} != training inputs {train.inputs.shape}")
    weights = cfg.weights
    bs = min(cfg.batch_size, n)
    per_epoch = int(np.ceil(n / bs))
    eval_every = cfg.eval_every or per_epoch
    history = ConvergenceLog()

    def evaluate(epoch, update):
        history.record(epoch, update, predictive_losses(spec, params, train),
                       predictive_losses(spec, params, val))

    evaluate(0, 0)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    order = data_rng.permutation(n)
    pos = 0
    breakdown = None
    try:
        for step in range(cfg.n_updates):
            if pos + bs > n:
                order = data_rng.permutation(n)
                pos = 0
            idx = order[pos:pos + bs]
            pos += bs
            x, y = train.inputs[idx], train.labels[idx]
            if input_masks is not None:
                x = apply_mask(x, input_masks[idx], mask_rng)
            inputs = x
            if weights.baseline == "input_dropout" and weights.baseline_weight > 0:
                inputs = _dropout_inputs(x, weights.baseline_weight, cfg.n_models, drop_rng)
            try:
                breakdown, grads = objective(spec, params, inputs, y, manifold, weights, x_manifold=x)
            except NumericalError as err:
                err.breakdown = err.breakdown or breakdown
                raise
            history.zero_grad_events += breakdown.zero_grad_events
            if pool is None:
                results = [adam_step(s, p, g) for s, p, g in zip(states, params, grads)]
            else:
                results = list(pool.map(adam_step, states, params, grads))
            params = [r[0] for r in results]
            states = [r[1] for r in results]
            if (step + 1) % eval_every == 0 or step + 1 == cfg.n_updates:
                evaluate((step + 1) // per_epoch, step + 1)
                tr = history.final()
                if not all(np.isfinite(a) and np.isfinite(b) for a, b in tr):
                    raise NumericalError("pred", f"update {step + 1}", breakdown)
    finally:
        if pool is not None:
            pool.shutdown()
    if breakdown is not None:
        log.info("trained %d models for %d updates; last batch %s", cfg.n_models, cfg.n_updates,
                 breakdown.as_dict())
    return ModelSet(spec, params), history


# -- files ------------------------------------------------------------------

MAGIC = b"UDM2"


def save_model_set(path, models):
    spec = models.spec
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(models), len(spec.layer_widths)))
        fh.write(struct.pack(f"<{len(spec.layer_widths)}I", *spec.layer_widths))
        fh.write(struct.pack("<d", spec.slope))
        for p in models.params:
            for a in p.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model_set(path):
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a UDM2 model-set file")
    m, n_w = r.u32(), r.u32()
    if n_w < 2:
        raise DimensionMismatch(f"{path}: spec needs at least two widths")
    widths = tuple(r.u32() for _ in range(n_w))
    slope = struct.unpack("<d", r.take(8))[0]
    spec = MlpSpec(widths, slope)
    params = []
    for _ in range(m):
        arrays = []
        for ws, bs in spec.shapes():
            arrays.append(r.f64(ws))
            arrays.append(r.f64(bs))
        params.append(MlpParams.from_arrays(arrays))
    r.done()
    return ModelSet(spec, params)
