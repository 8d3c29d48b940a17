"""Gradient-based input masks, masked fine-tuning and greedy pairwise distillation."""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import input_gradients
from .datasets import Batch, MaskableDataset, apply_mask
from .errors import BadMagic, NumericalError, ShapeError
from .losses import LossWeights
from .manifold import _Reader
from .training import TrainConfig, init_models, train_models

log = logging.getLogger(__name__)


@dataclass
class MaskSet:
    """Binary masks of shape ``(M, n, d_in)``; each element is owned by one model."""

    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ShapeError(f"masks must have shape (M, n, d), got {self.masks.shape}")

    @property
    def n_models(self):
        return self.masks.shape[0]

    def __getitem__(self, m):
        return self.masks[m]

    def union(self, models):
        return np.any(self.masks[list(models)], axis=0)


def compute_masks(models, data, global_mask=False):
    """Assign each input element to the model with the largest |input gradient| there.

    Ties go to the lowest model index. With ``global_mask`` the magnitudes
    are averaged over instances first and one mask is shared by all rows.
    """
    spec = models.spec
    if len(models) == 0:
        raise ValueError("need at least one model")
    x = data.inputs if isinstance(data, Batch) else np.asarray(data, dtype=np.float64)
    mags = np.abs(np.array([input_gradients(spec, p, x) for p in models.params]))
    if global_mask:
        mags = np.broadcast_to(mags.mean(axis=1, keepdims=True), mags.shape)
    owner = np.argmax(mags, axis=0)
    masks = owner[None, :, :] == np.arange(len(models))[:, None, None]
    return MaskSet(masks)


def masked_dataset(batch, mask, seed, batch_size=256):
    """One masked copy of ``batch`` (rows shuffled, then filled per minibatch)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(batch))
    x = apply_mask(batch.inputs[order], mask[order], rng, batch_size)
    return MaskableDataset(x, batch.labels[order], mask[order])


@dataclass
class FinetuneConfig:
    n_updates: int = 2000
    lr: float = 0.002
    batch_size: int = 256
    seed: int = 0
    from_scratch: bool = False


def finetune(spec, params, train, mask, val, cfg):
    """Plain-BCE Adam training of one model on its masked training data.

    Masked elements are refilled from other rows of each minibatch as it is
    drawn, so the fill changes from one update to the next.
    """
    if cfg.n_updates == 0:
        return params.copy()
    tc = TrainConfig(1, spec, LossWeights(), cfg.lr, cfg.batch_size, cfg.n_updates, cfg.seed)
    init = init_models(spec, 1, cfg.seed) if cfg.from_scratch else [params]
    ms, _ = train_models(tc, train, val, None, init=init, input_masks=mask)
    return ms.params[0]


@dataclass
class SelectorStrategy:
    """Scores a model; higher is better. Ties go to the lower model index."""

    score: object
    label: str = "custom"

    def __call__(self, spec, params):
        s = float(self.score(spec, params))
        if not np.isfinite(s):
            raise NumericalError("selector", f"{self.label} returned {s}")
        return s


def accuracy_selector(batch, label="ood-val-accuracy"):
    from .evaluate import accuracy

    return SelectorStrategy(lambda spec, p: accuracy(spec, p, batch), label)


def mean_accuracy_selector(batches, label="ood-val-mean-accuracy"):
    """Mean accuracy over several batches, for choosing one model good on all of them."""
    from .evaluate import accuracy

    return SelectorStrategy(lambda spec, p: np.mean([accuracy(spec, p, b) for b in batches]), label)


def _ranked(scores):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


@dataclass
class DistillResult:
    params: object
    index: int
    models: list
    masks: list
    scores: list
    audit: list = field(default_factory=list)

    def audit_json(self):
        return json.dumps(self.audit, indent=2, sort_keys=True) + "\n"


def greedy_distill(spec, params_list, masks, train, val, selector, ft_cfg, max_combinations=5):
    """Greedy pairwise combination of models through OR-ed masks.

    Each iteration trains a model on the training data masked with the union
    of the two best models' masks. The loop stops when the newest model is
    not the selector's best or after ``max_combinations`` iterations.
    """
    if len(params_list) < 2:
        raise ValueError("need at least two models to distill")
    pool = [p for p in params_list]
    pool_masks = [masks[m] for m in range(masks.n_models)]
    if len(pool_masks) != len(pool):
        raise ShapeError(f"{len(pool_masks)} masks for {len(pool)} models")
    scores = [selector(spec, p) for p in pool]
    audit = []
    for it in range(max_combinations):
        k, l = _ranked(scores)[:2]
        union = pool_masks[k] | pool_masks[l]
        cfg = FinetuneConfig(ft_cfg.n_updates, ft_cfg.lr, ft_cfg.batch_size, ft_cfg.seed + 1000 * (it + 1),
                             ft_cfg.from_scratch)
        new = finetune(spec, pool[k], train, union, val, cfg)
        pool.append(new)
        pool_masks.append(union)
        scores.append(selector(spec, new))
        best = _ranked(scores)[0]
        audit.append({"iteration": it, "parents": [int(k), int(l)], "child": len(pool) - 1,
                      "selector": selector.label, "selector_scores": [float(s) for s in scores],
                      "best": int(best)})
        log.info("distill iteration %d: merged %d+%d -> score %.4f (best %d)", it, k, l, scores[-1], best)
        if best != len(pool) - 1:
            break
    best = _ranked(scores)[0]
    return DistillResult(pool[best], best, pool, pool_masks, scores, audit)


# -- files ------------------------------------------------------------------

MAGIC = b"UDM3"


def save_masks(path, masks):
    m, n, d = masks.masks.shape
    # per (instance, model) rows, bits packed little-endian within each byte
    order = np.ascontiguousarray(masks.masks.transpose(1, 0, 2))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", n, m, d))
        fh.write(np.packbits(order.reshape(-1), bitorder="little").tobytes())


def load_masks(path):
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a UDM3 mask file")
    n, m, d = r.u32(), r.u32(), r.u32()
    nbits = n * m * d
    packed = np.frombuffer(r.take((nbits + 7) // 8), dtype=np.uint8)
    r.done()
    bits = np.unpackbits(packed, bitorder="little")[:nbits].astype(bool)
    return MaskSet(bits.reshape(n, m, d).transpose(1, 0, 2))
