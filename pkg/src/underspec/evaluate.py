"""Accuracy matrices, disagreement, the underspecification proxy and gradient diagnostics."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import forward, input_gradients
from .errors import ShapeError
from .losses import COS_EPS, indep_loss

log = logging.getLogger(__name__)

MI_GUARD = 1e-12


def predict(spec, params, x):
    """Hard predictions; a logit of exactly 0 predicts class 1."""
    return (forward(spec, params, x)[0] >= 0.0).astype(np.float64)


def accuracy(spec, params, batch):
    if len(batch) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return float(np.mean(predict(spec, params, batch.inputs) == batch.labels))


def disagreement_rate(spec, params1, params2, pool):
    pool = np.asarray(pool, dtype=np.float64)
    if pool.shape[0] == 0:
        raise ValueError("empty pool")
    return float(np.mean(predict(spec, params1, pool) != predict(spec, params2, pool)))


def disagreement_matrix(spec, params_list, pool):
    preds = np.array([predict(spec, p, pool) for p in params_list])
    return (preds[:, None, :] != preds[None, :, :]).mean(axis=2)


def accuracy_matrix(spec, params_list, test_sets):
    """Rows are models, columns are test sets."""
    return np.array([[accuracy(spec, p, t) for t in test_sets] for p in params_list])


def best_model_matrix(spec, params_list, test_sets):
    """Row ``r``: accuracies on every set of the model that is best on set ``r``.

    Ties go to the lower model index. Returns ``(matrix, best_indices)``.
    """
    if not test_sets:
        raise ValueError("need at least one test set")
    acc = accuracy_matrix(spec, params_list, test_sets)
    best = [int(np.argmax(acc[:, r])) for r in range(acc.shape[1])]
    return acc[best], best


def gradient_mi(g1, g2):
    """Mutual information of the linearized outputs, -0.5 ln(max(1 - cos^2, guard))."""
    c2 = indep_loss(g1, g2)
    value = -0.5 * np.log(max(1.0 - c2, MI_GUARD))
    if c2 > 1.0 - 1e-9:
        log.info("gradient_mi saturated (parallel gradients): %.4f", value)
    return float(value)


def spearman_grad_corr(spec, params_list, sample):
    """Mean pairwise Spearman correlation of per-element |input gradient| rankings.

    Points where a model's gradient magnitudes are all equal have undefined
    ranks and are skipped. Returns ``(mean_rho, n_skipped)``.
    """
    if len(params_list) < 2:
        raise ValueError("need at least two models")
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[0] == 0:
        raise ValueError("empty sample")
    mags = np.abs(np.array([input_gradients(spec, p, sample) for p in params_list]))
    return spearman_from_magnitudes(mags)


def spearman_from_magnitudes(mags):
    """``mags`` has shape ``(M, n, d)``."""
    m, n, _ = mags.shape
    const = np.ptp(mags, axis=2) == 0
    ranks = rankdata(mags, axis=2)
    ranks = ranks - ranks.mean(axis=2, keepdims=True)
    norms = np.sqrt(np.sum(ranks ** 2, axis=2))
    vals = []
    skipped = 0
    for a in range(m):
        for b in range(a + 1, m):
            ok = ~(const[a] | const[b])
            skipped += int(np.sum(~ok))
            rho = np.sum(ranks[a] * ranks[b], axis=1)[ok] / (norms[a][ok] * norms[b][ok])
            vals.append(np.sort(rho))
    allv = np.concatenate(vals) if vals else np.array([])
    if allv.size == 0:
        return float("nan"), skipped
    return float(np.mean(allv)), skipped


@dataclass
class UnderspecReport:
    n_converged: int
    converged: list
    train_losses: list
    val_losses: list
    disagreement: list
    min_disagreement: float = None
    mean_disagreement: float = None
    distinct: bool = None
    delta: float = 0.2

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("n_converged", "converged", "train_losses", "val_losses", "disagreement",
                 "min_disagreement", "mean_disagreement", "distinct", "delta")}


def underspec_report(spec, params_list, train, val, pool, eps_tr, eps_val, delta=0.2):
    """Count models meeting both risk thresholds and check they disagree off-distribution.

    Risk is the mean binary cross-entropy. ``distinct`` is True when every
    pair of converged models disagrees on at least a ``delta`` fraction of
    the pool; it is None with fewer than two converged models.
    """
    from .training import predictive_losses

    tr = predictive_losses(spec, params_list, train)
    va = predictive_losses(spec, params_list, val)
    conv = [i for i, (a, b) in enumerate(zip(tr, va)) if a < eps_tr and b < eps_val]
    rep = UnderspecReport(len(conv), conv, tr, va, [], delta=delta)
    if len(conv) >= 2:
        dm = disagreement_matrix(spec, [params_list[i] for i in conv], pool)
        iu = np.triu_indices(len(conv), 1)
        pairs = dm[iu]
        rep.disagreement = dm.tolist()
        rep.min_disagreement = float(pairs.min())
        rep.mean_disagreement = float(pairs.mean())
        rep.distinct = bool(pairs.min() >= delta)
    return rep


def mean_pairwise_mi(spec, params_list, sample):
    """Average gradient MI over points and model pairs (diagnostic)."""
    g = np.array([input_gradients(spec, p, sample) for p in params_list])
    vals = []
    for a in range(len(params_list)):
        for b in range(a + 1, len(params_list)):
            dots = np.sum(g[a] * g[b], axis=1)
            c2 = dots ** 2 / ((np.sum(g[a] ** 2, axis=1) + COS_EPS) * (np.sum(g[b] ** 2, axis=1) + COS_EPS))
            vals.append(-0.5 * np.log(np.maximum(1.0 - c2, MI_GUARD)))
    return float(np.mean(np.concatenate(vals))) if vals else 0.0


@dataclass
class EvalReport:
    accuracy: list
    best_matrix: list
    best_indices: list
    underspec: dict
    spearman: float
    spearman_skipped: int
    mean_mi: float
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return {"accuracy": self.accuracy, "best_matrix": self.best_matrix,
                "best_indices": self.best_indices, "underspec": self.underspec,
                "spearman": self.spearman, "spearman_skipped": self.spearman_skipped,
                "mean_mi": self.mean_mi, "config": self.config, "extra": self.extra}

    def to_json(self):
        return json.dumps(_plain(self.as_dict()), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        lines = []
        acc = np.array(self.accuracy)
        sets = [f"set{t}" for t in range(acc.shape[1])]
        lines.append("accuracy (rows: models, columns: test sets)")
        lines.append(format_table(acc, [f"model{i}" for i in range(acc.shape[0])], sets))
        lines.append("")
        lines.append("best model per test set (rows) evaluated on every set (columns)")
        lines.append(format_table(np.array(self.best_matrix),
                                  [f"best@{s} (m{i})" for s, i in zip(sets, self.best_indices)], sets))
        lines.append("")
        u = self.underspec
        lines.append(f"converged models: {u['n_converged']} {u['converged']}")
        if u.get("mean_disagreement") is not None:
            lines.append(f"pairwise OOD disagreement: min {u['min_disagreement']:.4f} "
                         f"mean {u['mean_disagreement']:.4f} distinct={u['distinct']} (delta {u['delta']})")
        lines.append(f"spearman |grad| rank correlation: {self.spearman:.4f} (skipped {self.spearman_skipped})")
        lines.append(f"mean gradient MI: {self.mean_mi:.4f}")
        for k in sorted(self.extra):
            lines.append(f"{k}: {json.dumps(_plain(self.extra[k]), sort_keys=True)}")
        return "\n".join(lines) + "\n"


def format_table(mat, row_names, col_names, fmt="{:.3f}"):
    cells = [[fmt.format(v) for v in row] for row in mat]
    w0 = max([len(r) for r in row_names] + [0])
    widths = [max(len(c), *(len(r[j]) for r in cells)) if cells else len(c) for j, c in enumerate(col_names)]
    out = [" " * w0 + "  " + "  ".join(c.rjust(w) for c, w in zip(col_names, widths))]
    for name, row in zip(row_names, cells):
        out.append(name.ljust(w0) + "  " + "  ".join(v.rjust(w) for v, w in zip(row, widths)))
    return "\n".join(out)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def evaluate_models(spec, params_list, bundle, eps_tr, eps_val, delta=0.2, n_diag=200, config=None):
    """Full report on a dataset bundle."""
    if len(bundle.test_sets) == 0:
        raise ShapeError("bundle has no test sets")
    acc = accuracy_matrix(spec, params_list, bundle.test_sets)
    best = [int(np.argmax(acc[:, r])) for r in range(acc.shape[1])]
    under = underspec_report(spec, params_list, bundle.train, bundle.val_id, bundle.ood_pool,
                             eps_tr, eps_val, delta)
    sample = bundle.ood_pool[:n_diag]
    if len(params_list) >= 2:
        rho, skipped = spearman_grad_corr(spec, params_list, sample)
        mi = mean_pairwise_mi(spec, params_list, sample)
    else:
        rho, skipped, mi = float("nan"), 0, 0.0
    return EvalReport(acc.tolist(), acc[best].tolist(), best, under.as_dict(), rho, skipped, mi,
                      config or {})
