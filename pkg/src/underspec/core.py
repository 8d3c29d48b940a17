"""Leaky-ReLU MLPs with input gradients and double backprop.

Everything here works on float64 numpy arrays. A network maps ``d_in``
inputs to one raw logit. Layer ``l`` computes ``z_l = h_{l-1} W_l^T + b_l``
and hidden layers apply a leaky ReLU; the last layer is linear.

The input gradient of a leaky-ReLU network is piecewise constant in ``x``:
with the activation gates frozen it is the product
``W_1^T D_1 W_2^T ... D_{L-1} w_L^T``. A loss that depends on it therefore
has an exact parameter gradient obtained by pushing the loss's cotangent
with respect to the input gradient forward through the gated linear
network (see :func:`backward`).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError

DEFAULT_SLOPE = 0.01


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    slope: float = DEFAULT_SLOPE

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ShapeError("need at least input and output widths")
        if widths[-1] != 1:
            raise ShapeError(f"output width must be 1, got {widths[-1]}")
        if any(w < 1 for w in widths):
            raise ShapeError(f"widths must be positive, got {widths}")
        if not 0.0 < self.slope < 1.0:
            raise ShapeError(f"leaky slope must be in (0, 1), got {self.slope}")

    @property
    def d_in(self):
        return self.layer_widths[0]

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    def shapes(self):
        w = self.layer_widths
        return [((w[i + 1], w[i]), (w[i + 1],)) for i in range(self.n_layers)]


@dataclass
class MlpParams:
    """Per-layer weights ``(out, in)`` and biases ``(out,)``."""

    weights: list
    biases: list

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        """Weights and biases interleaved, layer by layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, vec):
        """New params with this object's shapes and values from ``vec``."""
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.array(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        if pos != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} entries, params need {pos}")
        return MlpParams.from_arrays(out)

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def zeros_like_params(params):
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


def zero_params(spec):
    return MlpParams([np.zeros(ws) for ws, _ in spec.shapes()],
                     [np.zeros(bs) for _, bs in spec.shapes()])


def init_params(spec, rng):
    """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for W and b."""
    weights, biases = [], []
    for (out_dim, in_dim), _ in spec.shapes():
        bound = 1.0 / np.sqrt(in_dim)
        weights.append(rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        biases.append(rng.uniform(-bound, bound, size=out_dim))
    return MlpParams(weights, biases)


def check_params(spec, params):
    if len(params.weights) != spec.n_layers or len(params.biases) != spec.n_layers:
        raise ShapeError(f"spec has {spec.n_layers} layers, params have {len(params.weights)}")
    for i, ((ws, bs), w, b) in enumerate(zip(spec.shapes(), params.weights, params.biases)):
        if w.shape != ws:
            raise ShapeError(f"weight shape {w.shape}, expected {ws}", layer=i)
        if b.shape != bs:
            raise ShapeError(f"bias shape {b.shape}, expected {bs}", layer=i)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ShapeError(f"input has shape {x.shape}, expected (n, {spec.d_in})", layer=0)
    return x


@dataclass
class ForwardCache:
    """Layer inputs ``h`` (``h[0]`` is x) and pre-activations ``z``."""

    h: list
    z: list
    gates: list = field(default_factory=list)

    @property
    def logits(self):
        return self.z[-1][:, 0]


def forward(spec, params, x):
    """Batched forward pass. Returns ``(logits of shape (n,), cache)``."""
    check_params(spec, params)
    h = _as_batch(spec, x)
    hs, zs, gates = [h], [], []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        zs.append(z)
        if i < spec.n_layers - 1:
            # positive branch at exactly 0
            gate = np.where(z >= 0.0, 1.0, spec.slope)
            gates.append(gate)
            h = z * gate
            hs.append(h)
    cache = ForwardCache(hs, zs, gates)
    return cache.logits, cache


def logit_sensitivities(spec, params, cache):
    """Per-sample d(logit)/dz_l for every layer plus the input gradient.

    Returns ``(us, g)`` where ``us[l]`` has shape ``(n, width_{l+1})`` and
    ``g`` has shape ``(n, d_in)``.
    """
    n = cache.h[0].shape[0]
    us = [None] * spec.n_layers
    u = np.ones((n, 1))
    for i in range(spec.n_layers - 1, -1, -1):
        us[i] = u
        a = u @ params.weights[i]
        if i > 0:
            u = a * cache.gates[i - 1]
    return us, a


def input_gradients(spec, params, x):
    """Batched input gradients of the logit, shape ``(n, d_in)``."""
    _, cache = forward(spec, params, x)
    return logit_sensitivities(spec, params, cache)[1]


def backward(spec, params, cache, us, dlogit, dgrad=None):
    """Parameter gradient of a loss depending on the logits and input gradients.

    ``dlogit`` (n,) is dLoss/dlogit per sample and ``dgrad`` (n, d_in) is
    dLoss/d(input gradient) per sample. Gates are treated as constants,
    which is exact away from kinks since leaky ReLU is piecewise linear.
    """
    dlogit = np.asarray(dlogit, dtype=np.float64)
    q = None if dgrad is None else np.asarray(dgrad, dtype=np.float64)
    gw, gb = [], []
    for i in range(spec.n_layers):
        delta = us[i] * dlogit[:, None]
        left = cache.h[i] * dlogit[:, None]
        if q is not None:
            left = left + q
        gw.append(us[i].T @ left)
        gb.append(delta.sum(axis=0))
        if q is not None and i < spec.n_layers - 1:
            q = (q @ params.weights[i].T) * cache.gates[i]
    return MlpParams(gw, gb)


def mlp_forward(spec, params, x):
    """Logit and pre-activation trace for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}", layer=0)
    logits, cache = forward(spec, params, x)
    return float(logits[0]), [z[0].copy() for z in cache.z]


def input_gradient(spec, params, x):
    """Gradient of the logit with respect to a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}", layer=0)
    return input_gradients(spec, params, x)[0]


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def bce_with_logits(z, y):
    """Per-sample binary cross-entropy of sigmoid(z) against labels y."""
    return np.logaddexp(0.0, z) - y * z
