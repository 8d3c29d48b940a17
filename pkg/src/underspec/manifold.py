"""Models of the data manifold and intrinsic dimension estimation.

Both manifold models expose the same two operations used by the training
objective:

* ``project_vectors(x, v)``: map tangent vectors ``v`` at points ``x`` onto
  the manifold (a linear map in ``v`` for fixed ``x``);
* ``project_vectors_t(x, w)``: the transpose of that map, needed to
  backpropagate through a loss evaluated on projected vectors.

``v`` and ``w`` may carry leading batch axes in front of ``(n, d_in)``.
"""

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import MlpParams
from .errors import BadMagic, DimensionMismatch, NumericalError, ShapeError, TruncatedFile
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


def _check_vec(v, d, what="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != d:
        raise ShapeError(f"{what} has trailing dimension {v.shape[-1]}, expected {d}")
    return v


# -- PCA --------------------------------------------------------------------

@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def d_in(self):
        return self.components.shape[1]

    @property
    def d_manifold(self):
        return self.components.shape[0]

    def project_point(self, x):
        x = _check_vec(x, self.d_in, "point")
        return self.mean + ((x - self.mean) @ self.components.T) @ self.components

    def project_vectors(self, x, v):
        v = _check_vec(v, self.d_in)
        return (v @ self.components.T) @ self.components

    # orthogonal projector: symmetric
    project_vectors_t = project_vectors


def fit_pca(pool, n_comp):
    """Top right-singular vectors of the centered pool.

    Signs are fixed so that the first entry with magnitude above 1e-12 of
    each component is positive.
    """
    pool = np.asarray(pool, dtype=np.float64)
    n, d = pool.shape
    if not 1 <= n_comp <= min(n, d):
        raise ValueError(f"n_comp={n_comp} outside [1, min(n_rows, d_in)={min(n, d)}]")
    mean = pool.mean(axis=0)
    _, s, vt = np.linalg.svd(pool - mean, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(np.float64).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if n_comp > rank:
        raise ValueError(f"requested {n_comp} components but the centered pool has rank {rank}")
    comps = vt[:n_comp].copy()
    for row in comps:
        lead = np.flatnonzero(np.abs(row) > 1e-12)[0]
        if row[lead] < 0:
            row *= -1.0
    var = s ** 2
    return PcaModel(mean, comps, var[:n_comp] / var.sum())


def pca_project_vector(model, v):
    return model.project_vectors(None, v)


# -- autoencoder ------------------------------------------------------------

_ACTS = ("relu", "linear", "sigmoid")


def _act(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return expit(z)
    return z


def _act_slope(kind, z):
    """Elementwise derivative of the activation, frozen by the point path."""
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "sigmoid":
        s = expit(z)
        return s * (1.0 - s)
    return np.ones_like(z)


@dataclass
class AeModel:
    """Dense autoencoder; optionally variational (log-variance head on the encoder).

    ``enc`` maps d_in through ``hidden`` to the latent mean, ``dec`` maps the
    latent back through ``reversed(hidden)`` to d_in. ``enc_logvar`` is a
    single linear layer from the last encoder hidden layer (or the input when
    there are no hidden layers).
    """

    d_in: int
    d_latent: int
    hidden: tuple = (128, 128)
    variational: bool = True
    kl_weight: float = 0.01
    hidden_act: str = "relu"
    output_act: str = "sigmoid"
    enc: MlpParams = None
    dec: MlpParams = None
    enc_logvar: MlpParams = None
    final_losses: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.hidden_act not in _ACTS or self.output_act not in _ACTS:
            raise ValueError(f"activations must be in {_ACTS}")

    @property
    def d_manifold(self):
        return self.d_latent

    def enc_widths(self):
        return (self.d_in,) + self.hidden + (self.d_latent,)

    def dec_widths(self):
        return (self.d_latent,) + self.hidden[::-1] + (self.d_in,)

    def _layer_acts(self):
        n_enc = len(self.hidden) + 1
        enc = [self.hidden_act] * (n_enc - 1) + ["linear"]
        dec = [self.hidden_act] * (n_enc - 1) + [self.output_act]
        return enc + dec

    def layers(self):
        return list(zip(self.enc.weights + self.dec.weights, self.enc.biases + self.dec.biases))

    def _point_pass(self, x):
        """Forward along the mean path; returns output and pre-activations."""
        h = x
        zs = []
        for (w, b), kind in zip(self.layers(), self._layer_acts()):
            z = h @ w.T + b
            zs.append(z)
            h = _act(kind, z)
        return h, zs

    def project_point(self, x):
        x = _check_vec(x, self.d_in, "point")
        return self._point_pass(x)[0]

    def project_vectors(self, x, v):
        """Jacobian-vector product: bias dropped, slopes taken from the point path."""
        x = _check_vec(x, self.d_in, "point")
        v = _check_vec(v, self.d_in)
        _, zs = self._point_pass(x)
        for (w, _), kind, z in zip(self.layers(), self._layer_acts(), zs):
            v = (v @ w.T) * _act_slope(kind, z)
        return v

    def project_vectors_t(self, x, w_vec):
        """Transpose of :meth:`project_vectors` (vector-Jacobian product)."""
        x = _check_vec(x, self.d_in, "point")
        g = _check_vec(w_vec, self.d_in)
        _, zs = self._point_pass(x)
        layers = self.layers()
        acts = self._layer_acts()
        for i in range(len(layers) - 1, -1, -1):
            g = (g * _act_slope(acts[i], zs[i])) @ layers[i][0]
        return g


def init_autoencoder(d_in, d_latent, hidden=(128, 128), variational=True, kl_weight=0.01,
                     hidden_act="relu", output_act="sigmoid", seed=0):
    rng = np.random.default_rng(seed)
    model = AeModel(d_in, d_latent, tuple(hidden), variational, kl_weight, hidden_act, output_act)

    def dense(widths):
        ws, bs = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(a)
            ws.append(rng.uniform(-bound, bound, size=(b, a)))
            bs.append(rng.uniform(-bound, bound, size=b))
        return MlpParams(ws, bs)

    model.enc = dense(model.enc_widths())
    model.dec = dense(model.dec_widths())
    if variational:
        feat = model.enc_widths()[-2]
        model.enc_logvar = MlpParams([np.zeros((d_latent, feat))], [np.zeros(d_latent)])
    return model


def _ae_loss_and_grads(model, x, eps):
    """Reconstruction SSE (+ weighted KL) per sample, averaged over the batch."""
    enc_l = list(zip(model.enc.weights, model.enc.biases))
    dec_l = list(zip(model.dec.weights, model.dec.biases))
    acts = model._layer_acts()
    n_enc = len(enc_l)

    hs, zs = [x], []
    h = x
    for i, (w, b) in enumerate(enc_l[:-1]):
        z = h @ w.T + b
        zs.append(z)
        h = _act(acts[i], z)
        hs.append(h)
    feat = h
    mu = feat @ enc_l[-1][0].T + enc_l[-1][1]
    if model.variational:
        lv = feat @ model.enc_logvar.weights[0].T + model.enc_logvar.biases[0]
        lv = np.clip(lv, -20.0, 20.0)
        std = np.exp(0.5 * lv)
        lat = mu + std * eps
    else:
        lat = mu

    dh, dz = [lat], []
    h = lat
    for j, (w, b) in enumerate(dec_l):
        z = h @ w.T + b
        dz.append(z)
        h = _act(acts[n_enc + j], z)
        dh.append(h)
    out = h
    n = x.shape[0]
    diff = out - x
    rec = np.sum(diff ** 2) / n
    kl = 0.0
    if model.variational:
        kl = 0.5 * np.sum(mu ** 2 + np.exp(lv) - 1.0 - lv) / n

    # backward through decoder
    g = 2.0 * diff / n
    gdw, gdb = [None] * len(dec_l), [None] * len(dec_l)
    for j in range(len(dec_l) - 1, -1, -1):
        g = g * _act_slope(acts[n_enc + j], dz[j])
        gdw[j] = g.T @ dh[j]
        gdb[j] = g.sum(axis=0)
        g = g @ dec_l[j][0]
    g_lat = g
    g_mu = g_lat
    g_feat = 0.0
    glw = glb = None
    if model.variational:
        g_mu = g_lat + model.kl_weight * mu / n
        g_lv = g_lat * eps * 0.5 * std + model.kl_weight * 0.5 * (np.exp(lv) - 1.0) / n
        glw = g_lv.T @ feat
        glb = g_lv.sum(axis=0)
        g_feat = g_lv @ model.enc_logvar.weights[0]
    gew, geb = [None] * n_enc, [None] * n_enc
    gew[-1] = g_mu.T @ feat
    geb[-1] = g_mu.sum(axis=0)
    g = g_mu @ enc_l[-1][0] + g_feat
    for i in range(n_enc - 2, -1, -1):
        g = g * _act_slope(acts[i], zs[i])
        gew[i] = g.T @ hs[i]
        geb[i] = g.sum(axis=0)
        g = g @ enc_l[i][0]
    grads = MlpParams(gew + gdw + ([glw] if model.variational else []),
                      geb + gdb + ([glb] if model.variational else []))
    return rec, kl, grads


def _pack(model):
    ws = model.enc.weights + model.dec.weights
    bs = model.enc.biases + model.dec.biases
    if model.variational:
        ws = ws + model.enc_logvar.weights
        bs = bs + model.enc_logvar.biases
    return MlpParams(list(ws), list(bs))


def _unpack(model, params):
    n_enc = len(model.enc.weights)
    n_dec = len(model.dec.weights)
    model.enc = MlpParams(params.weights[:n_enc], params.biases[:n_enc])
    model.dec = MlpParams(params.weights[n_enc:n_enc + n_dec], params.biases[n_enc:n_enc + n_dec])
    if model.variational:
        model.enc_logvar = MlpParams(params.weights[-1:], params.biases[-1:])


def train_autoencoder(pool, model, epochs=100, batch_size=256, lr=0.001, seed=0):
    """Fit ``model`` (from :func:`init_autoencoder`) to the pool with Adam.

    Returns a new model; ``final_losses`` holds the last epoch's mean
    reconstruction and KL terms.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise ValueError("pool must be a nonempty matrix")
    if pool.shape[1] != model.d_in:
        raise ShapeError(f"pool has {pool.shape[1]} columns, model expects {model.d_in}")
    rng = np.random.default_rng(seed)
    out = AeModel(model.d_in, model.d_latent, model.hidden, model.variational, model.kl_weight,
                  model.hidden_act, model.output_act, model.enc.copy(), model.dec.copy(),
                  model.enc_logvar.copy() if model.enc_logvar is not None else None)
    params = _pack(out)
    state = AdamState.init(params, lr=lr)
    n = pool.shape[0]
    rec_hist = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        rec_sum = kl_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _unpack(out, params)
            eps = rng.standard_normal((idx.size, out.d_latent)) if out.variational else None
            rec, kl, grads = _ae_loss_and_grads(out, pool[idx], eps)
            if not (np.isfinite(rec) and np.isfinite(kl)):
                raise NumericalError("reconstruction" if not np.isfinite(rec) else "kl",
                                     f"autoencoder diverged at epoch {epoch}")
            params, state = adam_step(state, params, grads)
            rec_sum += rec * idx.size
            kl_sum += kl * idx.size
        rec_hist.append(rec_sum / n)
        log.debug("ae epoch %d rec %.6g kl %.6g", epoch, rec_sum / n, kl_sum / n)
    _unpack(out, params)
    out.final_losses = {"reconstruction": rec_hist[-1] if rec_hist else float("nan"),
                        "kl": kl_sum / n if epochs else float("nan")}
    log.info("autoencoder trained: %s", out.final_losses)
    return out


def ae_project_point(model, x):
    return model.project_point(x)


def ae_project_vector(model, x, v):
    return model.project_vectors(x, v)


# -- wrapper ----------------------------------------------------------------

@dataclass
class ManifoldModel:
    """Either a :class:`PcaModel` or an :class:`AeModel` plus its dimension."""

    model: object

    @property
    def kind(self):
        return "pca" if isinstance(self.model, PcaModel) else "ae"

    @property
    def d_manifold(self):
        return self.model.d_manifold

    @property
    def d_in(self):
        return self.model.d_in

    def project_vectors(self, x, v):
        return self.model.project_vectors(x, v)

    def project_vectors_t(self, x, w):
        return self.model.project_vectors_t(x, w)


# -- intrinsic dimension ----------------------------------------------------

def _knn_distances(x, k, chunk=1024):
    """Sorted exact Euclidean distances to the k nearest other points."""
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((n, k))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        # a few spare candidates absorb rounding in the expanded form
        m = min(k + 8, n - 1)
        cand = np.argpartition(d2, m - 1, axis=1)[:, :m]
        diff = x[start:stop, None, :] - x[cand]
        exact = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        exact.sort(axis=1)
        out[start:stop] = exact[:, :k]
    return out


def estimate_intrinsic_dim(pool, k=20, return_local=False):
    """Maximum-likelihood k-NN intrinsic dimension (Levina-Bickel form).

    Per anchor ``x``: ``m(x) = [(1/(k-1)) sum_{j<k} ln(T_k/T_j)]^-1``. The
    pool estimate inverts the mean of ``1/m(x)``. Duplicate rows are dropped
    with a warning.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2:
        raise ShapeError(f"pool must be a matrix, got shape {pool.shape}")
    uniq = np.unique(pool, axis=0)
    if uniq.shape[0] < pool.shape[0]:
        warnings.warn(f"dropped {pool.shape[0] - uniq.shape[0]} duplicate points", RuntimeWarning)
    if uniq.shape[0] == 1:
        raise ValueError("all points in the pool are identical")
    if not 2 <= k < uniq.shape[0]:
        raise ValueError(f"need 2 <= k < n_unique_points ({uniq.shape[0]}), got k={k}")
    x = uniq - uniq.mean(axis=0)
    t = _knn_distances(x, k)
    inv_local = np.mean(np.log(t[:, -1:] / t[:, :-1]), axis=1)
    est = 1.0 / np.mean(np.sort(inv_local))
    if return_local:
        return est, 1.0 / inv_local
    return float(est)


# -- files ------------------------------------------------------------------

MAGIC = b"UDM1"


def _write_f64(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, nbytes):
        if self.pos + nbytes > len(self.raw):
            raise TruncatedFile(f"{self.path}: unexpected end of file")
        out = self.raw[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]

    def f64(self, shape):
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)

    def done(self):
        if self.pos != len(self.raw):
            raise DimensionMismatch(f"{self.path}: {len(self.raw) - self.pos} trailing bytes")


_ACT_CODE = {a: i for i, a in enumerate(_ACTS)}


def save_manifold(path, manifold):
    m = manifold.model if isinstance(manifold, ManifoldModel) else manifold
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        if isinstance(m, PcaModel):
            fh.write(struct.pack("<BII", 0, m.d_manifold, m.d_in))
            _write_f64(fh, m.mean)
            _write_f64(fh, m.components)
            _write_f64(fh, m.explained_variance_ratio)
        else:
            fh.write(struct.pack("<BIIIBBB", 1, m.d_in, m.d_latent, len(m.hidden),
                                 int(m.variational), _ACT_CODE[m.hidden_act], _ACT_CODE[m.output_act]))
            fh.write(struct.pack(f"<{len(m.hidden)}I", *m.hidden))
            _write_f64(fh, np.array([m.kl_weight]))
            for a in _pack(m).arrays():
                _write_f64(fh, a)


def load_manifold(path):
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or r.take(4) != MAGIC:
        raise BadMagic(f"{path}: not a UDM1 manifold file")
    kind = r.u8()
    if kind == 0:
        n_comp, d = r.u32(), r.u32()
        mean = r.f64((d,))
        comps = r.f64((n_comp, d))
        evr = r.f64((n_comp,))
        r.done()
        return ManifoldModel(PcaModel(mean, comps, evr))
    if kind != 1:
        raise DimensionMismatch(f"{path}: unknown manifold kind {kind}")
    d_in, d_lat, n_hidden = r.u32(), r.u32(), r.u32()
    variational, hact, oact = r.u8(), r.u8(), r.u8()
    hidden = tuple(r.u32() for _ in range(n_hidden))
    kl = float(r.f64((1,))[0])
    m = AeModel(d_in, d_lat, hidden, bool(variational), kl, _ACTS[hact], _ACTS[oact])
    widths = [m.enc_widths(), m.dec_widths()]
    arrays = []
    for ws in widths:
        for a, b in zip(ws[:-1], ws[1:]):
            arrays.append(r.f64((b, a)))
            arrays.append(r.f64((b,)))
    if m.variational:
        feat = m.enc_widths()[-2]
        arrays.append(r.f64((d_lat, feat)))
        arrays.append(r.f64((d_lat,)))
    r.done()
    n_enc = len(m.enc_widths()) - 1
    p = MlpParams.from_arrays(arrays)
    m.enc = MlpParams(p.weights[:n_enc], p.biases[:n_enc])
    m.dec = MlpParams(p.weights[n_enc:2 * n_enc], p.biases[n_enc:2 * n_enc])
    if m.variational:
        m.enc_logvar = MlpParams(p.weights[-1:], p.biases[-1:])
    return ManifoldModel(m)
