"""Train the baseline and the full method on the collage data and print accuracy matrices.

    python3 scripts/run_collages.py --seeds 0 1 2 --updates 3000
"""

import argparse
import time

import numpy as np

from underspec import TUNED_WEIGHTS, LossWeights, ManifoldModel, MlpSpec, TrainConfig, train_models
from underspec.datasets import GenConfig, gen_collages
from underspec.evaluate import accuracy_matrix, best_model_matrix, spearman_grad_corr, underspec_report
from underspec.manifold import estimate_intrinsic_dim, fit_pca


def run(bundle, manifold, weights, n_models, updates, seed):
    spec = MlpSpec((bundle.train.inputs.shape[1], 8, 1))
    t0 = time.perf_counter()
    models, _ = train_models(TrainConfig(n_models, spec, weights, n_updates=updates, seed=seed),
                             bundle.train, bundle.val_id, manifold)
    return models, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--updates", type=int, default=3000)
    ap.add_argument("--models", type=int, default=8)
    args = ap.parse_args()
    np.set_printoptions(precision=3, suppress=True, linewidth=120)
    for seed in args.seeds:
        bundle = gen_collages(GenConfig(seed=seed))
        d_est = estimate_intrinsic_dim(bundle.ood_pool)
        manifold = ManifoldModel(fit_pca(bundle.ood_pool, int(round(d_est))))
        print(f"== seed {seed}: estimated dimension {d_est:.2f}")
        for name, weights, man in (("baseline", LossWeights(), None), ("full", TUNED_WEIGHTS, manifold)):
            models, secs = run(bundle, man, weights, args.models, args.updates, seed)
            acc = accuracy_matrix(models.spec, models.params, bundle.test_sets)
            best, idx = best_model_matrix(models.spec, models.params, bundle.test_sets)
            rep = underspec_report(models.spec, models.params, bundle.train, bundle.val_id, bundle.ood_pool, 0.3, 0.3)
            rho, _ = spearman_grad_corr(models.spec, models.params, bundle.ood_pool[:200])
            print(f"-- {name} ({secs:.0f}s)")
            print("accuracy (models x test sets)\n", acc)
            print("best-model matrix, rows chosen per set", idx, "\n", best)
            print(f"converged {rep.n_converged}, mean OOD disagreement {rep.mean_disagreement}, spearman {rho:.3f}")


if __name__ == "__main__":
    main()
