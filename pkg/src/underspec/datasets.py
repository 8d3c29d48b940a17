"""Synthetic collage datasets and dataset files.

A collage is ``n_tiles`` square tiles laid out as contiguous blocks of the
input vector. Tile ``t`` of instance ``i`` is::

    0.5 + (s * margin_t / 2 + jitter * a) * u_t + V_t z + noise

where ``s`` is the tile's class bit (+1/-1), ``u_t`` a fixed unit template,
``a`` a standard normal amplitude, ``V_t`` an orthonormal nuisance basis
orthogonal to ``u_t`` (scaled by ``nuisance_scale``) and ``noise`` isotropic
Gaussian. Values are clamped to [0, 1]. In training and validation data all
bits agree with the label; in test set ``t`` only tile ``t`` agrees and the
other bits are uniform; the unlabeled pool has all bits uniform.
"""

import csv
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, ConfigError, DimensionMismatch, ShapeError, TruncatedFile

log = logging.getLogger(__name__)

@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.inputs.ndim != 2:
            raise DimensionMismatch(f"inputs must be a matrix, got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionMismatch(
                f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx):
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class MaskableDataset:
    inputs: np.ndarray
    labels: np.ndarray
    masks: np.ndarray = None

    def __post_init__(self):
        if self.masks is not None and self.masks.shape != self.inputs.shape:
            raise DimensionMismatch(f"mask shape {self.masks.shape} != input shape {self.inputs.shape}")

    def as_batch(self):
        return Batch(self.inputs, self.labels)


@dataclass
class GenConfig:
    n_tiles: int = 4
    tile_side: int = 8
    margins: tuple = (0.6, 0.3, 0.22, 0.16)
    noise: tuple = (0.003, 0.003, 0.003, 0.003)
    nuisance_rank: tuple = (2, 2, 2, 2)
    template_jitter: float = 0.02
    nuisance_scale: float = 0.05
    n_train: int = 4000
    n_val: int = 1000
    n_pool: int = 8000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.margins = tuple(float(v) for v in self.margins)
        self.noise = tuple(float(v) for v in self.noise)
        self.nuisance_rank = tuple(int(v) for v in self.nuisance_rank)

    def validate(self):
        if self.n_tiles < 1:
            raise ConfigError("n_tiles", "must be >= 1")
        if self.tile_side < 2:
            raise ConfigError("tile_side", "must be >= 2")
        for name in ("margins", "noise", "nuisance_rank"):
            if len(getattr(self, name)) != self.n_tiles:
                raise ConfigError(name, f"needs {self.n_tiles} entries")
        if any(not g > 0 for g in self.margins):
            raise ConfigError("margins", "every margin must be > 0")
        if any(not s >= 0 for s in self.noise):
            raise ConfigError("noise", "noise levels must be >= 0")
        if any(r < 0 or r > self.tile_side ** 2 - 1 for r in self.nuisance_rank):
            raise ConfigError("nuisance_rank", f"ranks must be in [0, {self.tile_side ** 2 - 1}]")
        for name in ("template_jitter", "nuisance_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("n_train", "n_val", "n_pool", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")

    @property
    def tile_dim(self):
        return self.tile_side ** 2

    @property
    def d_in(self):
        return self.n_tiles * self.tile_dim

    def tile_slice(self, t):
        return slice(t * self.tile_dim, (t + 1) * self.tile_dim)

    def true_intrinsic_dim(self):
        return int(sum(r + 1 for r in self.nuisance_rank))

    def to_dict(self):
        d = asdict(self)
        for k in ("margins", "noise", "nuisance_rank"):
            d[k] = list(d[k])
        return d


@dataclass
class DatasetBundle:
    train: Batch
    val_id: Batch
    ood_pool: np.ndarray
    test_sets: list
    config: GenConfig
    templates: np.ndarray = field(repr=False, default=None)

    @property
    def true_intrinsic_dim(self):
        return self.config.true_intrinsic_dim()


def _tile_geometry(cfg, rng):
    """Unit templates (n_tiles, k2) and nuisance bases, one (k2, r_t) per tile."""
    k2 = cfg.tile_dim
    templates, bases = [], []
    for t in range(cfg.n_tiles):
        u = rng.choice([-1.0, 1.0], size=k2) / np.sqrt(k2)
        r = cfg.nuisance_rank[t]
        # orthonormal basis orthogonal to u: QR with u as first column
        q, _ = np.linalg.qr(np.column_stack([u, rng.standard_normal((k2, r))]))
        q = q * np.sign(q[:, :1].T @ u)[0]
        templates.append(u)
        bases.append(q[:, 1:1 + r])
    return np.array(templates), bases


def _render(cfg, bits, templates, bases, rng):
    n = bits.shape[0]
    x = np.empty((n, cfg.d_in))
    for t in range(cfg.n_tiles):
        amp = bits[:, t] * cfg.margins[t] / 2.0 + cfg.template_jitter * rng.standard_normal(n)
        tile = 0.5 + amp[:, None] * templates[t][None, :]
        r = cfg.nuisance_rank[t]
        if r:
            tile += cfg.nuisance_scale * rng.standard_normal((n, r)) @ bases[t].T
        if cfg.noise[t] > 0:
            tile += cfg.noise[t] * rng.standard_normal((n, cfg.tile_dim))
        x[:, cfg.tile_slice(t)] = tile
    return np.clip(x, 0.0, 1.0)


def _labeled(cfg, n, templates, bases, rng, informative=None):
    y = rng.integers(0, 2, size=n)
    bits = np.repeat((2 * y - 1)[:, None], cfg.n_tiles, axis=1).astype(np.float64)
    if informative is not None:
        random_bits = rng.choice([-1.0, 1.0], size=(n, cfg.n_tiles))
        keep = np.zeros(cfg.n_tiles, dtype=bool)
        keep[informative] = True
        bits = np.where(keep[None, :], bits, random_bits)
    return Batch(_render(cfg, bits, templates, bases, rng), y)


def gen_collages(cfg):
    """Generate a :class:`DatasetBundle`; bit-identical for identical configs."""
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    geo_ss, train_ss, val_ss, pool_ss, test_ss = root.spawn(5)
    templates, bases = _tile_geometry(cfg, np.random.default_rng(geo_ss))

    train = _labeled(cfg, cfg.n_train, templates, bases, np.random.default_rng(train_ss))
    val = _labeled(cfg, cfg.n_val, templates, bases, np.random.default_rng(val_ss))
    pool_rng = np.random.default_rng(pool_ss)
    pool_bits = pool_rng.choice([-1.0, 1.0], size=(cfg.n_pool, cfg.n_tiles))
    pool = _render(cfg, pool_bits, templates, bases, pool_rng)
    tests = [_labeled(cfg, cfg.n_test, templates, bases, np.random.default_rng(ss), informative=t)
             for t, ss in enumerate(test_ss.spawn(cfg.n_tiles))]
    return DatasetBundle(train, val, pool, tests, cfg, templates)


def ood_validation_sets(cfg, n, seed_offset=1):
    """Extra per-tile OOD batches drawn independently of the test sets.

    Used by model selectors so that selection never touches the test data.
    """
    cfg.validate()
    geo_ss = np.random.SeedSequence(cfg.seed).spawn(5)[0]
    templates, bases = _tile_geometry(cfg, np.random.default_rng(geo_ss))
    ss = np.random.SeedSequence([cfg.seed, 7919, seed_offset])
    return [_labeled(cfg, n, templates, bases, np.random.default_rng(s), informative=t)
            for t, s in enumerate(ss.spawn(cfg.n_tiles))]


def apply_mask(inputs, mask, rng, batch_size=None):
    """Replace masked elements with the same element of another row of the minibatch.

    Rows are grouped into consecutive minibatches of ``batch_size`` (default:
    all rows). Within a minibatch each column gets a random cyclic derangement
    of the rows, and a masked element takes the value of its donor row. A
    single-row minibatch has no donors and is left unchanged.
    """
    x = np.asarray(inputs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
    n = x.shape[0]
    bs = n if batch_size is None else batch_size
    out = x.copy()
    for start in range(0, n, bs):
        stop = min(start + bs, n)
        size = stop - start
        blk = ~mask[start:stop]
        if not blk.any():
            continue
        if size == 1:
            log.info("apply_mask: minibatch of one row, masked elements left unchanged")
            continue
        # per column, a random cyclic derangement of the rows: no row donates to
        # itself and an all-zeros mask permutes each column
        order = np.argsort(rng.random((size, x.shape[1])), axis=0)
        donor = np.empty_like(order)
        np.put_along_axis(donor, order, np.roll(order, -1, axis=0), axis=0)
        rows, cols = np.nonzero(blk)
        out[start + rows, cols] = x[start + donor[rows, cols], cols]
    return out



# -- files ------------------------------------------------------------------

MAGIC = b"UDS1"
_HEADER = struct.Struct("<4sIIB")


def save_matrix(path, inputs, labels=None):
    """Write the UDS1 format. Inputs are narrowed to float32."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got shape {inputs.shape}")
    n, d = inputs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, 0 if labels is None else 1))
        fh.write(np.ascontiguousarray(inputs, dtype="<f4").tobytes())
        if labels is not None:
            labels = np.asarray(labels).reshape(-1)
            if labels.shape[0] != n:
                raise DimensionMismatch(f"{n} rows but {labels.shape[0]} labels")
            fh.write(labels.astype(np.uint8).tobytes())


def load_matrix(path):
    """Read a UDS1 file. Returns ``(inputs float64, labels or None)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: file shorter than header")
    magic, n, d, has_labels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if has_labels not in (0, 1):
        raise DimensionMismatch(f"{path}: has_labels flag is {has_labels}")
    need = _HEADER.size + 4 * n * d + (n if has_labels else 0)
    if len(raw) < need:
        raise TruncatedFile(f"{path}: expected {need} bytes, found {len(raw)}")
    if len(raw) > need:
        raise DimensionMismatch(f"{path}: {len(raw) - need} trailing bytes after payload")
    off = _HEADER.size
    inputs = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 4 * n * d).astype(np.float64)
    return inputs, labels


def save_batch(path, batch):
    save_matrix(path, batch.inputs, batch.labels)


def load_batch(path):
    inputs, labels = load_matrix(path)
    if labels is None:
        raise DimensionMismatch(f"{path}: file has no labels")
    return Batch(inputs, labels)


def save_csv(path, inputs, labels=None):
    inputs = np.asarray(inputs)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{j}" for j in range(inputs.shape[1])]
        if labels is not None:
            header.append("y")
        w.writerow(header)
        for i, row in enumerate(inputs):
            vals = [repr(float(v)) for v in row]
            if labels is not None:
                vals.append(str(int(labels[i])))
            w.writerow(vals)


def load_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TruncatedFile(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    has_y = "y" in header
    cols = [j for j, h in enumerate(header) if h != "y"]
    inputs = np.array([[float(r[j]) for j in cols] for r in body], dtype=np.float64).reshape(len(body), len(cols))
    labels = None
    if has_y:
        yj = header.index("y")
        labels = np.array([float(r[yj]) for r in body])
    return inputs, labels


def save_bundle(out_dir, bundle):
    """Write every split of a bundle into ``out_dir``; returns the written paths."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.uds", "val_id": out / "val_id.uds", "ood_pool": out / "ood_pool.uds"}
    save_batch(paths["train"], bundle.train)
    save_batch(paths["val_id"], bundle.val_id)
    save_matrix(paths["ood_pool"], bundle.ood_pool)
    for t, b in enumerate(bundle.test_sets):
        paths[f"test_{t}"] = out / f"test_{t}.uds"
        save_batch(paths[f"test_{t}"], b)
    meta = {"config": bundle.config.to_dict(), "true_intrinsic_dim": bundle.true_intrinsic_dim}
    paths["meta"] = out / "meta.json"
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def load_bundle(data_dir):
    """Read a bundle written by :func:`save_bundle` (float32-narrowed inputs)."""
    import json

    d = Path(data_dir)
    meta = json.loads((d / "meta.json").read_text())
    cfg = GenConfig(**meta["config"])
    pool, _ = load_matrix(d / "ood_pool.uds")
    tests = [load_batch(d / f"test_{t}.uds") for t in range(cfg.n_tiles)]
    return DatasetBundle(load_batch(d / "train.uds"), load_batch(d / "val_id.uds"), pool, tests, cfg)
