"""Grid over loss weights on one collage seed; prints best accuracy per test set.

    python3 scripts/sweep_lambdas.py --indep 1 10 --manifold 0 1 --mode soft hard_projection
"""

import argparse
import itertools

import numpy as np

from underspec import LossWeights, ManifoldModel, MlpSpec, TrainConfig, train_models
from underspec.datasets import GenConfig, gen_collages
from underspec.evaluate import accuracy_matrix
from underspec.manifold import fit_pca


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--updates", type=int, default=3000)
    ap.add_argument("--indep", type=float, nargs="+", default=[1.0, 10.0])
    ap.add_argument("--manifold", type=float, nargs="+", default=[0.0, 1.0])
    ap.add_argument("--mode", nargs="+", default=["soft", "hard_projection"])
    ap.add_argument("--components", type=int, default=12)
    args = ap.parse_args()
    np.set_printoptions(precision=3, suppress=True)
    bundle = gen_collages(GenConfig(seed=args.seed))
    manifold = ManifoldModel(fit_pca(bundle.ood_pool, args.components))
    spec = MlpSpec((bundle.train.inputs.shape[1], 8, 1))
    for li, lm, mode in itertools.product(args.indep, args.manifold, args.mode):
        if mode == "hard_projection" and lm > 0:
            continue
        w = LossWeights(li, lm, mode)
        models, hist = train_models(TrainConfig(8, spec, w, n_updates=args.updates, seed=args.seed),
                                    bundle.train, bundle.val_id, manifold)
        best = accuracy_matrix(spec, models.params, bundle.test_sets).max(axis=0)
        print(f"indep={li:g} manifold={lm:g} mode={mode}: best per set {best} "
              f"train losses {np.array([tr for tr, _ in hist.final()])}")


if __name__ == "__main__":
    main()
