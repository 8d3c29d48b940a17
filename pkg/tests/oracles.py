"""Independent reference implementations used as test oracles.

Nothing here imports the package's numerics: the MLP, its input gradient
and the batch objective are re-derived from scratch with explicit loops in
extended precision (``np.longdouble``) so finite differences are far below
the tolerances being checked.
"""

import numpy as np

LD = np.longdouble
GUARD = LD("1e-12")


def leaky(z, slope):
    return z if z >= 0 else slope * z


def leaky_d(z, slope):
    return LD(1) if z >= 0 else LD(slope)


def mlp_scalar(weights, biases, x, slope):
    """Logit and input gradient for one point, layer by layer."""
    h = [LD(v) for v in x]
    # Jacobian of current activations with respect to x, rows = units
    jac = [[LD(1) if i == j else LD(0) for j in range(len(x))] for i in range(len(x))]
    n_layers = len(weights)
    for li in range(n_layers):
        w, b = weights[li], biases[li]
        z = [sum(LD(w[o][i]) * h[i] for i in range(len(h))) + LD(b[o]) for o in range(len(b))]
        zj = [[sum(LD(w[o][i]) * jac[i][k] for i in range(len(h))) for k in range(len(x))]
              for o in range(len(b))]
        if li < n_layers - 1:
            d = [leaky_d(v, slope) for v in z]
            h = [leaky(v, slope) for v in z]
            jac = [[d[o] * zj[o][k] for k in range(len(x))] for o in range(len(z))]
        else:
            return z[0], zj[0]


def bce(z, y):
    # log(1 + e^z) - y z, stable in both tails
    z = LD(z)
    sp = z + np.log1p(np.exp(-z)) if z > 0 else np.log1p(np.exp(z))
    return sp - LD(y) * z


def cos2(a, b):
    dot = sum(p * q for p, q in zip(a, b))
    na = sum(p * p for p in a)
    nb = sum(q * q for q in b)
    return dot * dot / ((na + GUARD) * (nb + GUARD))


def project(P, g):
    return [sum(LD(P[i][j]) * g[j] for j in range(len(g))) for i in range(len(g))]


def objective_scalar(models, X, y, slope, P, lam_indep, lam_manifold):
    """The batch objective with a linear (PCA) projection matrix ``P``.

    ``models`` is a list of ``(weights, biases)`` nested lists.
    """
    m = len(models)
    n = len(X)
    total = LD(0)
    for i in range(n):
        outs = [mlp_scalar(w, b, X[i], slope) for w, b in models]
        pred = sum(bce(z, y[i]) for z, _ in outs) / m
        indep = LD(0)
        for a in range(m):
            for c in range(m):
                if a != c:
                    indep += cos2(outs[a][1], outs[c][1])
        man = LD(0)
        for _, g in outs:
            pg = project(P, g)
            man += sum((p - q) ** 2 for p, q in zip(pg, g))
        total += pred + LD(lam_indep) * indep / (m * m) + LD(lam_manifold) * man / m
    return total / n


def pca_projection(pool, n_comp):
    """Projection onto the top ``n_comp`` principal directions, from an eigendecomposition."""
    pool = np.asarray(pool, dtype=np.float64)
    c = pool - pool.mean(axis=0)
    vals, vecs = np.linalg.eigh(c.T @ c)
    top = vecs[:, np.argsort(vals)[::-1][:n_comp]]
    return top @ top.T


def flat_params(weights, biases):
    out = []
    for w, b in zip(weights, biases):
        out.extend(np.asarray(w, dtype=np.float64).ravel())
        out.extend(np.asarray(b, dtype=np.float64).ravel())
    return np.array(out)


def unflat_params(vec, shapes):
    """``shapes`` is a list of ``((out, in), (out,))``; returns nested longdouble lists."""
    ws, bs, pos = [], [], 0
    for (o, i), _ in shapes:
        ws.append([[LD(vec[pos + r * i + c]) for c in range(i)] for r in range(o)])
        pos += o * i
        bs.append([LD(vec[pos + r]) for r in range(o)])
        pos += o
    return ws, bs


def fd_objective_gradient(models_flat, shapes, X, y, slope, P, lam_indep, lam_manifold, h=1e-6):
    """Central finite differences of :func:`objective_scalar` over every parameter."""
    vecs = [np.array([LD(v) for v in f], dtype=LD) for f in models_flat]
    X = [[LD(v) for v in row] for row in np.asarray(X)]
    out = []
    for mi, base in enumerate(vecs):
        grad = np.zeros(len(base), dtype=LD)
        for j in range(len(base)):
            vals = []
            for sign in (1, -1):
                v = base.copy()
                v[j] += sign * LD(h)
                models = [unflat_params(v if k == mi else vecs[k], shapes) for k in range(len(vecs))]
                vals.append(objective_scalar(models, X, y, slope, P, lam_indep, lam_manifold))
            grad[j] = (vals[0] - vals[1]) / (2 * LD(h))
        out.append(grad)
    return out


def bce_backprop_1hidden(w1, b1, w2, b2, X, y, slope):
    """Mean-BCE parameter gradients of a one-hidden-layer net, written out directly."""
    z1 = X @ w1.T + b1
    a1 = np.where(z1 >= 0, z1, slope * z1)
    z2 = (a1 @ w2.T + b2)[:, 0]
    p = 1.0 / (1.0 + np.exp(-z2))
    d2 = (p - y) / len(y)
    gw2 = d2[None, :] @ a1
    gb2 = np.array([d2.sum()])
    d1 = d2[:, None] * w2[0][None, :] * np.where(z1 >= 0, 1.0, slope)
    return d1.T @ X, d1.sum(axis=0), gw2, gb2


def levina_bickel(pool, k):
    """Brute-force MLE intrinsic dimension with harmonic aggregation."""
    pool = np.asarray(pool, dtype=np.float64)
    inv = []
    for i in range(pool.shape[0]):
        d = np.sqrt(np.sum((pool - pool[i]) ** 2, axis=1))
        d = np.sort(d)[1:k + 1]
        inv.append(np.mean(np.log(d[-1] / d[:-1])))
    return 1.0 / np.mean(inv)


def spearman_pair(a, b):
    """Spearman's rho via mid-ranks computed by hand."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return np.array(r)

    ra, rb = ranks(list(a)), ranks(list(b))
    ra -= ra.mean()
    rb -= rb.mean()
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))
