"""Acceptance suite: one test per criterion, each recording a PASS/FAIL summary line.

The collage runs (baseline and full method, three seeds) are trained once per
session and shared by criteria 4 to 8.
"""

import json
import time
from dataclasses import asdict

import numpy as np
import pytest

from underspec.cli import run_command
from underspec.core import MlpSpec
from underspec.datasets import Batch, GenConfig, gen_collages, ood_validation_sets
from underspec.evaluate import accuracy_matrix, best_model_matrix, gradient_mi, spearman_grad_corr, underspec_report
from underspec.losses import TUNED_WEIGHTS, LossWeights, param_gradient
from underspec.manifold import (ManifoldModel, ae_project_point, ae_project_vector, estimate_intrinsic_dim, fit_pca,
                                init_autoencoder, pca_project_vector, train_autoencoder)
from underspec.specialize import FinetuneConfig, compute_masks, finetune, greedy_distill, mean_accuracy_selector
from underspec.training import ModelSet, TrainConfig, init_models, train_models

import oracles

SEEDS = (0, 1, 2)
N_MODELS = 8
N_UPDATES = 3000
EPS = 0.3


def _train(bundle, manifold, weights, seed):
    spec = MlpSpec((bundle.train.inputs.shape[1], 8, 1))
    cfg = TrainConfig(N_MODELS, spec, weights, n_updates=N_UPDATES, seed=seed, eps_tr=EPS, eps_val=EPS)
    t0 = time.process_time()
    models, _ = train_models(cfg, bundle.train, bundle.val_id, manifold)
    return models, time.process_time() - t0


@pytest.fixture(scope="session")
def collage_runs():
    runs = {}
    for seed in SEEDS:
        bundle = gen_collages(GenConfig(seed=seed))
        d_est = estimate_intrinsic_dim(bundle.ood_pool, k=20)
        manifold = ManifoldModel(fit_pca(bundle.ood_pool, int(round(d_est))))
        base, t_base = _train(bundle, None, LossWeights(), seed)
        full, t_full = _train(bundle, manifold, TUNED_WEIGHTS, seed)
        runs[seed] = dict(bundle=bundle, manifold=manifold, base=base, full=full, t_base=t_base, t_full=t_full,
                          acc_base=accuracy_matrix(base.spec, base.params, bundle.test_sets),
                          acc_full=accuracy_matrix(full.spec, full.params, bundle.test_sets))
    return runs


def fmt(v):
    return np.array2string(np.asarray(v), precision=3, separator=",")


# -- 1 ----------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(acceptance):
    t0 = time.process_time()
    rng = np.random.default_rng(0)
    spec = MlpSpec((6, 4, 1))
    models = [init_models(spec, 1, s)[0] for s in (1, 2)]
    x = rng.random((5, 6))
    y = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    pool = rng.standard_normal((60, 6)) * np.array([3.0, 2.0, 1.5, 1.0, 0.3, 0.1])
    grads, _ = param_gradient(spec, models, Batch(x, y), ManifoldModel(fit_pca(pool, 3)), LossWeights(1.0, 1.0))
    fd = oracles.fd_objective_gradient([m.flatten() for m in models], spec.shapes(), x, y, spec.slope,
                                       oracles.pca_projection(pool, 3), 1.0, 1.0)
    worst = 0.0
    for g, f in zip(grads, fd):
        g, f = g.flatten(), f.astype(float)
        worst = max(worst, float(np.max(np.abs(g - f) / np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-300))))
    elapsed = time.process_time() - t0
    ok = acceptance(1, worst <= 1e-5 and elapsed < 60,
                    f"max rel err {worst:.2e} (<=1e-5) over {sum(m.flatten().size for m in models)} params, "
                    f"{elapsed:.1f}s (<60s)")
    assert ok


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_vector_projection(acceptance):
    bundle = gen_collages(GenConfig(seed=0, n_train=10, n_val=10, n_test=10, n_pool=2000))
    pool = bundle.ood_pool
    ae = train_autoencoder(pool, init_autoencoder(pool.shape[1], 12, hidden=(64,), seed=0), epochs=10, seed=0)
    rng = np.random.default_rng(1)
    worst, checked = 0.0, 0
    for x in pool[:200]:
        _, zs = ae._point_pass(x)
        if any(np.min(np.abs(z)) < 1e-3 for z, k in zip(zs, ae._layer_acts()) if k == "relu"):
            continue
        v = rng.standard_normal(pool.shape[1])
        h = 1e-5
        fd = (ae_project_point(ae, x + h * v) - ae_project_point(ae, x)) / h
        jv = ae_project_vector(ae, x, v)
        worst = max(worst, float(np.linalg.norm(fd - jv) / np.linalg.norm(jv)))
        checked += 1
    pca = fit_pca(pool, 12)
    idem = 0.0
    for v in rng.standard_normal((50, pool.shape[1])):
        pv = pca_project_vector(pca, v)
        idem = max(idem, float(np.max(np.abs(pca_project_vector(pca, pv) - pv))))
    ok = acceptance(2, checked >= 20 and worst <= 1e-3 and idem <= 1e-10,
                    f"AE JVP vs FD max rel err {worst:.2e} (<=1e-3) on {checked} kink-free points; "
                    f"PCA idempotence {idem:.1e} (<=1e-10)")
    assert ok


# -- 3 ----------------------------------------------------------------------------

def test_criterion_3_intrinsic_dimension(acceptance):
    t0 = time.process_time()
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.standard_normal((20, 3)))[0].T
    patch = rng.uniform(0, 1, (5000, 3)) @ basis + 1e-4 * rng.standard_normal((5000, 20))
    est_patch = estimate_intrinsic_dim(patch, k=20)
    t_patch = time.process_time() - t0
    bundle = gen_collages(GenConfig(seed=0, n_train=10, n_val=10, n_test=10))
    t1 = time.process_time()
    est_pool = estimate_intrinsic_dim(bundle.ood_pool, k=20)
    t_pool = time.process_time() - t1
    true = bundle.true_intrinsic_dim
    ok = acceptance(3, 2.5 <= est_patch <= 3.6 and abs(est_pool - true) <= 1.5 and max(t_patch, t_pool) < 30,
                    f"3-D patch {est_patch:.3f} in [2.5,3.6] ({t_patch:.1f}s); collage pool {est_pool:.3f} "
                    f"vs {true} +-1.5 ({t_pool:.1f}s)")
    assert ok


# -- 4 ----------------------------------------------------------------------------

def test_criterion_4_simplicity_bias_baseline(acceptance, collage_runs):
    per_seed, passes = [], 0
    total = 0.0
    for seed, r in collage_runs.items():
        best = r["acc_base"].max(axis=0)
        good = best[0] >= 0.95 and np.all(best[1:] <= 0.60)
        passes += good
        total += r["t_base"]
        per_seed.append(f"seed{seed} best {fmt(best)}")
    ok = acceptance(4, passes >= 2 and total <= 300,
                    f"{passes}/3 seeds with tile1>=0.95 and tiles2-4<=0.60; " + "; ".join(per_seed)
                    + f"; train cpu {total:.0f}s (<=300s)")
    assert ok


# -- 5 ----------------------------------------------------------------------------

def _gap(mat):
    off = mat[~np.eye(mat.shape[0], dtype=bool)]
    return float(np.mean(np.diag(mat)) - np.mean(off))


def test_criterion_5_feature_discovery(acceptance, collage_runs):
    per_seed, passes, gaps = [], 0, []
    total = 0.0
    for seed, r in collage_runs.items():
        best = r["acc_full"].max(axis=0)
        mat, _ = best_model_matrix(r["full"].spec, r["full"].params, r["bundle"].test_sets)
        gaps.append(_gap(mat))
        passes += bool(np.all(best >= 0.85))
        total += r["t_full"]
        per_seed.append(f"seed{seed} best {fmt(best)} gap {gaps[-1]:.3f}")
    ok = acceptance(5, passes >= 2 and np.mean(gaps) >= 0.20 and total <= 900,
                    f"{passes}/3 seeds with every tile>=0.85; mean diag-offdiag gap {np.mean(gaps):.3f} (>=0.20); "
                    + "; ".join(per_seed) + f"; train cpu {total:.0f}s (<=900s)")
    assert ok


# -- 6 ----------------------------------------------------------------------------

def test_criterion_6_finetune_and_distill(acceptance, collage_runs):
    r = collage_runs[0]
    bundle, full = r["bundle"], r["full"]
    spec = full.spec
    masks = compute_masks(full, bundle.train)
    tuned = ModelSet(spec, [finetune(spec, p, bundle.train, masks[m], bundle.val_id,
                                     FinetuneConfig(seed=17 * (m + 1)))
                            for m, p in enumerate(full.params)])
    before, after = r["acc_full"], accuracy_matrix(spec, tuned.params, bundle.test_sets)
    # the specialist for tile t is the model best on tile t before fine-tuning
    owners = [int(np.argmax(before[:, t])) for t in range(before.shape[1])]
    gains = np.array([after[m, t] - before[m, t] for t, m in enumerate(owners)])
    selectors = ood_validation_sets(bundle.config, 500)
    res = greedy_distill(spec, tuned.params, masks, bundle.train, bundle.val_id, mean_accuracy_selector(selectors),
                         FinetuneConfig(seed=0, from_scratch=True))
    distilled = accuracy_matrix(spec, [res.params], bundle.test_sets)[0]
    best_spec = after.max(axis=0)
    base_avg = float(r["acc_base"].mean())
    ft_ok = bool(np.all(gains >= 0.03))
    close_ok = bool(np.all(distilled >= best_spec - 0.02))
    above_ok = float(distilled.mean()) >= base_avg + 0.10
    ok = acceptance(6, ft_ok and close_ok and above_ok,
                    f"own-tile FT gains {fmt(gains)} (each>=0.03); distilled {fmt(distilled)} vs best specialist "
                    f"{fmt(best_spec)} (within 0.02); distilled mean {distilled.mean():.3f} vs baseline mean "
                    f"{base_avg:.3f} (+0.10); {len(res.audit)} distill iterations")
    assert ok


# -- 7 ----------------------------------------------------------------------------

def test_criterion_7_underspecification_proxy(acceptance, collage_runs):
    r = collage_runs[0]
    b = r["bundle"]
    rep_full = underspec_report(r["full"].spec, r["full"].params, b.train, b.val_id, b.ood_pool, EPS, EPS)
    rep_base = underspec_report(r["base"].spec, r["base"].params, b.train, b.val_id, b.ood_pool, EPS, EPS)
    d_full = rep_full.mean_disagreement or 0.0
    d_base = rep_base.mean_disagreement or 0.0
    ok = acceptance(7, rep_full.n_converged >= 4 and d_full >= 2 * d_base,
                    f"full: {rep_full.n_converged} converged, mean OOD disagreement {d_full:.4f}; "
                    f"baseline: {rep_base.n_converged} converged, {d_base:.4f} (need >=2x)")
    assert ok


# -- 8 ----------------------------------------------------------------------------

def test_criterion_8_diagnostics(acceptance, collage_runs):
    mi = gradient_mi([1.0, 1.0], [1.0, 0.0])
    rhos = []
    for seed, r in collage_runs.items():
        sample = r["bundle"].ood_pool[:200]
        rb, _ = spearman_grad_corr(r["base"].spec, r["base"].params, sample)
        rf, _ = spearman_grad_corr(r["full"].spec, r["full"].params, sample)
        rhos.append((rb, rf))
    rb, rf = np.mean(rhos, axis=0)
    ok = acceptance(8, abs(mi - 0.346574) <= 1e-6 and rf < rb and rf <= 0.60,
                    f"gradient_mi {mi:.6f} (0.346574+-1e-6); spearman baseline {rb:.3f} -> full {rf:.3f} "
                    f"(strictly lower, <=0.60); per seed " + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in rhos))
    assert ok


# -- 9 ----------------------------------------------------------------------------

def test_criterion_9_determinism(acceptance, tmp_path):
    cfg = {"seed": 3, "data": {"n_train": 400, "n_val": 200, "n_pool": 600, "n_test": 200},
           "train": {"n_models": 3, "n_updates": 100}, "loss": asdict(TUNED_WEIGHTS),
           "finetune": {"n_updates": 20}, "distill": {"n_updates": 20, "max_combinations": 2, "n_select": 100}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    codes = [run_command(["pipeline", "--config", str(path), "--workers", "1", "--out", str(tmp_path / n)])
             for n in ("a", "b")]
    a, b = ((tmp_path / n / "report.json").read_bytes() for n in ("a", "b"))
    ok = acceptance(9, codes == [0, 0] and a == b,
                    f"exit codes {codes}; report.json {len(a)} bytes, identical={a == b}")
    assert ok
