"""Predictive, independence, on-manifold and baseline losses.

The multi-model objective for a minibatch of ``n`` points and ``M`` models is

    mean_i [ (1/M) sum_m BCE_m
             + lambda_indep (1/M^2) sum_{m1 != m2} cos^2(g_m1, g_m2)
             + lambda_manifold (1/M) sum_m ||P g_m - g_m||^2
             + (1/M) sum_m baseline_m ]

with ``g_m`` the per-sample input gradient of model ``m``'s logit and ``P``
the manifold's vector projection at the sample. Diagonal pairs are left out
of the independence sum; they contribute the constant 1 each.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .core import backward, bce_with_logits, forward, logit_sensitivities, sigmoid
from .errors import ConfigError, NumericalError, ShapeError

log = logging.getLogger(__name__)

COS_EPS = 1e-12
BASELINES = ("none", "grad_l1", "grad_l2", "spectral_decoupling", "input_dropout")
MODES = ("soft", "hard_projection")


@dataclass
class LossWeights:
    lambda_indep: float = 0.0
    lambda_manifold: float = 0.0
    mode: str = "soft"
    baseline: str = "none"
    baseline_weight: float = 0.0

    def validate(self):
        for name in ("lambda_indep", "lambda_manifold", "baseline_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(name, f"must be finite and >= 0, got {v}")
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.baseline not in BASELINES:
            raise ConfigError("baseline", f"must be one of {BASELINES}, got {self.baseline!r}")
        if self.baseline == "input_dropout" and not 0 <= self.baseline_weight < 1:
            raise ConfigError("baseline_weight", "dropout rate must be in [0, 1)")


# independence and manifold weights chosen on the four-tile collage sweep
TUNED_WEIGHTS = LossWeights(lambda_indep=10.0, lambda_manifold=0.0, mode="hard_projection")


@dataclass
class LossBreakdown:
    pred: float
    indep: float
    manifold: float
    baseline: float
    zero_grad_events: int = 0

    @property
    def total(self):
        return self.pred + self.indep + self.manifold + self.baseline

    def as_dict(self):
        return {"pred": self.pred, "indep": self.indep, "manifold": self.manifold,
                "baseline": self.baseline, "total": self.total,
                "zero_grad_events": self.zero_grad_events}


def indep_loss(g1, g2):
    """Squared cosine between two gradient vectors, in [0, 1]."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ShapeError(f"gradient shapes differ: {g1.shape} vs {g2.shape}")
    n1, n2 = g1 @ g1, g2 @ g2
    if n1 < COS_EPS or n2 < COS_EPS:
        log.debug("indep_loss: near-zero gradient, guard active")
    return float((g1 @ g2) ** 2 / ((n1 + COS_EPS) * (n2 + COS_EPS)))


def manifold_loss(x, g, manifold):
    """Squared distance between ``g`` and its projection on the manifold at ``x``."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != manifold.d_in:
        raise ShapeError(f"gradient has length {g.shape[-1]}, manifold expects {manifold.d_in}")
    r = manifold.project_vectors(x, g) - g
    return float(np.sum(r * r))


def baseline_penalty(kind, logit, g):
    if kind == "grad_l1":
        return float(np.sum(np.abs(g)))
    if kind == "grad_l2":
        return float(np.sum(np.asarray(g) ** 2))
    if kind == "spectral_decoupling":
        return float(logit) ** 2
    return 0.0


def _pairwise_cos2(g):
    """Off-diagonal cos^2 sums and their gradient for stacked gradients ``(M, n, d)``."""
    gt = np.ascontiguousarray(g.transpose(1, 0, 2))
    gram = gt @ gt.transpose(0, 2, 1)
    norms = np.diagonal(gram, axis1=1, axis2=2) + COS_EPS
    denom = norms[:, :, None] * norms[:, None, :]
    a = gram / denom
    m = g.shape[0]
    off = ~np.eye(m, dtype=bool)
    a = a * off[None]
    cos2 = a * gram
    per_sample = cos2.sum(axis=(1, 2))
    # d/dg_m sum_{ordered pairs} cos^2 = 4 sum_k a_mk g_k - 4 (sum_k a_mk gram_mk / N_m) g_m
    coef_self = cos2.sum(axis=2) / norms
    grad = 4.0 * (a @ gt).transpose(1, 0, 2) - 4.0 * coef_self.T[:, :, None] * g
    zero_events = int(np.sum(norms <= 2 * COS_EPS))
    return per_sample, grad, zero_events


def objective(spec, models, inputs, labels, manifold, weights, need_grad=True, x_manifold=None):
    """Loss breakdown and per-model parameter gradients of the batch objective.

    ``inputs`` is either one ``(n, d_in)`` matrix shared by all models or a
    list of per-model matrices (input dropout). ``x_manifold`` is the point
    at which manifold projections are taken; defaults to the shared inputs.
    """
    weights.validate()
    m = len(models)
    if m == 0:
        raise ValueError("need at least one model")
    labels = np.asarray(labels, dtype=np.float64)
    per_model = isinstance(inputs, (list, tuple))
    xs = list(inputs) if per_model else [inputs] * m
    n = xs[0].shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if x_manifold is None:
        x_manifold = xs[0]

    caches, usl, logits, grads_in = [], [], [], []
    for p, x in zip(models, xs):
        z, cache = forward(spec, p, x)
        us, g = logit_sensitivities(spec, p, cache)
        caches.append(cache)
        usl.append(us)
        logits.append(z)
        grads_in.append(g)
    z = np.array(logits)
    g = np.array(grads_in)

    pred = bce_with_logits(z, labels[None, :])
    pred_total = pred.sum() / (m * n)
    if not np.isfinite(pred_total):
        raise NumericalError("pred")
    dlogit = (sigmoid(z) - labels[None, :]) / (m * n)
    dgrad = np.zeros_like(g)

    indep_total = manifold_total = base_total = 0.0
    zero_events = 0
    need_indep = weights.lambda_indep > 0 and m > 1
    hard = weights.mode == "hard_projection" and manifold is not None

    if need_indep:
        if hard:
            gp = manifold.project_vectors(x_manifold, g)
            per_sample, dgp, zero_events = _pairwise_cos2(gp)
        else:
            per_sample, dgd, zero_events = _pairwise_cos2(g)
        scale = weights.lambda_indep / (m * m * n)
        indep_total = per_sample.sum() * scale
        if not np.isfinite(indep_total):
            raise NumericalError("indep")
        if need_grad:
            if hard:
                dgrad += scale * manifold.project_vectors_t(x_manifold, dgp)
            else:
                dgrad += scale * dgd

    if weights.lambda_manifold > 0 and manifold is not None and not hard:
        proj = manifold.project_vectors(x_manifold, g)
        r = proj - g
        scale = weights.lambda_manifold / (m * n)
        manifold_total = np.sum(r * r) * scale
        if not np.isfinite(manifold_total):
            raise NumericalError("manifold")
        if need_grad:
            dgrad += 2.0 * scale * (manifold.project_vectors_t(x_manifold, r) - r)

    bw = weights.baseline_weight
    if weights.baseline in ("grad_l1", "grad_l2", "spectral_decoupling") and bw > 0:
        scale = bw / (m * n)
        if weights.baseline == "grad_l1":
            base_total = np.abs(g).sum() * scale
            dgrad += scale * np.sign(g)
        elif weights.baseline == "grad_l2":
            base_total = (g * g).sum() * scale
            dgrad += 2.0 * scale * g
        else:
            base_total = (z * z).sum() * scale
            dlogit = dlogit + 2.0 * scale * z
        if not np.isfinite(base_total):
            raise NumericalError("baseline")

    breakdown = LossBreakdown(float(pred_total), float(indep_total), float(manifold_total),
                              float(base_total), zero_events)
    if not need_grad:
        return breakdown, None
    use_dgrad = need_indep or (weights.lambda_manifold > 0 and manifold is not None and not hard) \
        or weights.baseline in ("grad_l1", "grad_l2")
    out = []
    for i, p in enumerate(models):
        grad = backward(spec, p, caches[i], usl[i], dlogit[i], dgrad[i] if use_dgrad else None)
        if not grad.is_finite():
            raise NumericalError("grad", f"model {i}", breakdown)
        out.append(grad)
    return breakdown, out


def batch_loss(spec, models, batch, manifold, weights):
    breakdown, _ = objective(spec, models, batch.inputs, batch.labels, manifold, weights, need_grad=False)
    return breakdown.total, breakdown


def param_gradient(spec, models, batch, manifold, weights):
    """Exact parameter gradients of the batch objective for every model."""
    breakdown, grads = objective(spec, models, batch.inputs, batch.labels, manifold, weights)
    return grads, breakdown
