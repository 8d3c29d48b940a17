"""Command-line entry point: ``underspec <command> [options]``.

Every command writes its outputs into an ``--out`` directory together with
``manifest-<command>.json`` (config echo plus SHA-256 of each artifact).
Exit codes: 0 success, 2 invalid arguments or config, 3 file errors,
4 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import config_from_dict, load_config
from .core import MlpSpec
from .datasets import gen_collages, load_bundle, ood_validation_sets, save_bundle
from .errors import ConfigError, FileFormatError, NumericalError, UnderspecError
from .evaluate import accuracy_matrix, evaluate_models
from .manifold import (ManifoldModel, estimate_intrinsic_dim, fit_pca, init_autoencoder,
                       load_manifold, save_manifold, train_autoencoder)
from .specialize import (FinetuneConfig, accuracy_selector, compute_masks, finetune, greedy_distill, load_masks,
                         mean_accuracy_selector, save_masks)
from .training import ModelSet, TrainConfig, load_model_set, save_model_set, train_models

log = logging.getLogger("underspec")

EXIT_ARGS, EXIT_FILE, EXIT_NUMERIC = 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(out, command, cfg, artifacts, extra=None):
    out = Path(out)
    doc = {"command": command, "config": cfg.to_dict() if cfg is not None else None,
           "artifacts": {name: {"path": str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p),
                                "sha256": _sha256(p)} for name, p in sorted(artifacts.items())}}
    if extra:
        doc.update(extra)
    path = out / f"manifest-{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _config(args):
    if getattr(args, "config", None):
        return load_config(args.config)
    return config_from_dict({})


def _spec(cfg, d_in):
    return MlpSpec((d_in, *cfg.model.hidden, 1), cfg.model.slope)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- stages -------------------------------------------------------------------

def stage_gen_data(cfg, out):
    bundle = gen_collages(cfg.data)
    return save_bundle(out, bundle)


def stage_estimate_dim(cfg, bundle):
    return estimate_intrinsic_dim(bundle.ood_pool, k=cfg.manifold.k_neighbors)


def stage_fit_manifold(cfg, bundle, n_comp, path):
    mc = cfg.manifold
    if mc.kind == "pca":
        model = fit_pca(bundle.ood_pool, n_comp)
    else:
        ae = init_autoencoder(bundle.ood_pool.shape[1], n_comp, mc.ae_hidden, mc.ae_variational,
                              mc.ae_kl_weight, seed=cfg.seed)
        model = train_autoencoder(bundle.ood_pool, ae, mc.ae_epochs, mc.ae_batch_size, mc.ae_lr, cfg.seed)
    save_manifold(path, model)
    return ManifoldModel(model)


def stage_train(cfg, bundle, manifold, n_models, workers, out):
    spec = _spec(cfg, bundle.train.inputs.shape[1])
    t = cfg.train
    tc = TrainConfig(n_models, spec, cfg.loss, t.lr, t.batch_size, t.n_updates, cfg.seed,
                     t.eps_tr, t.eps_val, shared_init=t.shared_init, workers=workers)
    models, history = train_models(tc, bundle.train, bundle.val_id, manifold)
    paths = {"models": out / "models.udm", "convergence": out / "convergence.csv"}
    save_model_set(paths["models"], models)
    history.write_csv(paths["convergence"])
    return models, history, paths


def stage_masks(models, bundle, path, global_mask=False):
    masks = compute_masks(models, bundle.train, global_mask)
    save_masks(path, masks)
    return masks


def stage_finetune(cfg, models, masks, bundle, path):
    f = cfg.finetune
    tuned = [finetune(models.spec, p, bundle.train, masks[m], bundle.val_id,
                      FinetuneConfig(f.n_updates, f.lr, f.batch_size, cfg.seed + 17 * (m + 1), f.from_scratch))
             for m, p in enumerate(models.params)]
    out = ModelSet(models.spec, tuned)
    save_model_set(path, out)
    return out


def stage_distill(cfg, models, masks, bundle, out):
    """One greedy distillation per tile plus one for the mean over tiles, all on OOD validation accuracy."""
    d = cfg.distill
    selectors = ood_validation_sets(bundle.config, d.n_select)
    ft = FinetuneConfig(d.n_updates, cfg.finetune.lr, cfg.finetune.batch_size, cfg.seed, d.from_scratch)
    results = []
    for t, sel in enumerate(selectors):
        res = greedy_distill(models.spec, models.params, masks, bundle.train, bundle.val_id,
                             accuracy_selector(sel, f"ood-val-accuracy-tile{t}"), ft, d.max_combinations)
        results.append(res)
    # last entry: one model chosen for mean accuracy over every tile
    results.append(greedy_distill(models.spec, models.params, masks, bundle.train, bundle.val_id,
                                  mean_accuracy_selector(selectors), ft, d.max_combinations))
    distilled = ModelSet(models.spec, [r.params for r in results])
    paths = {"distilled": out / "distilled.udm", "audit": out / "distill-audit.json"}
    save_model_set(paths["distilled"], distilled)
    audit = [{"tile": t if t < len(selectors) else "all", "chosen": r.index, "steps": r.audit}
             for t, r in enumerate(results)]
    paths["audit"].write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return distilled, paths


def stage_evaluate(cfg, models, bundle, out, extra_sets=None):
    report = evaluate_models(models.spec, models.params, bundle, cfg.train.eps_tr, cfg.train.eps_val,
                             cfg.evaluate.delta, cfg.evaluate.n_diag, cfg.to_dict())
    for name, ms in (extra_sets or {}).items():
        report.extra[f"accuracy_{name}"] = accuracy_matrix(ms.spec, ms.params, bundle.test_sets).tolist()
    paths = {"report_json": out / "report.json", "report_txt": out / "report.txt"}
    paths["report_json"].write_text(report.to_json())
    paths["report_txt"].write_text(report.to_text())
    return report, paths


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args)
    paths = stage_gen_data(cfg, out)
    _write_manifest(out, "gen-data", cfg, paths)
    print(f"wrote {len(paths)} files to {out}")


def cmd_estimate_dim(args):
    cfg = _config(args)
    if args.k is not None:
        cfg.manifold.k_neighbors = args.k
    bundle = load_bundle(args.data)
    est = stage_estimate_dim(cfg, bundle)
    print(f"intrinsic dimension estimate: {est:.4f} (k={cfg.manifold.k_neighbors}, "
          f"generator value {bundle.true_intrinsic_dim})")
    if args.out:
        out = _out(args)
        path = out / "dimension.json"
        path.write_text(json.dumps({"estimate": est, "k": cfg.manifold.k_neighbors}, sort_keys=True) + "\n")
        _write_manifest(out, "estimate-dim", cfg, {"dimension": path})


def _n_components(cfg, args, bundle):
    if getattr(args, "components", None):
        return args.components
    if cfg.manifold.n_components:
        return cfg.manifold.n_components
    return max(1, int(round(stage_estimate_dim(cfg, bundle))))


def cmd_fit_manifold(args):
    cfg = _config(args)
    if args.kind:
        cfg.manifold.kind = args.kind
    bundle = load_bundle(args.data)
    out = _out(args)
    n_comp = _n_components(cfg, args, bundle)
    path = out / "manifold.udm"
    stage_fit_manifold(cfg, bundle, n_comp, path)
    _write_manifest(out, "fit-manifold", cfg, {"manifold": path}, {"n_components": n_comp})
    print(f"fitted {cfg.manifold.kind} manifold with {n_comp} dimensions -> {path}")


def cmd_train(args):
    cfg = _config(args)
    bundle = load_bundle(args.data)
    manifold = ManifoldModel(load_manifold(args.manifold)) if args.manifold else None
    n_models = args.models or cfg.train.n_models or (manifold.d_manifold if manifold else None)
    if n_models is None:
        raise ConfigError("train.n_models", "needed when no manifold is given")
    out = _out(args)
    _, history, paths = stage_train(cfg, bundle, manifold, n_models, args.workers, out)
    _write_manifest(out, "train", cfg, paths, {"n_models": n_models})
    conv = history.converged(cfg.train.eps_tr, cfg.train.eps_val)
    print(f"trained {n_models} models; converged: {conv}")


def cmd_masks(args):
    models = load_model_set(args.models)
    bundle = load_bundle(args.data)
    out = _out(args)
    path = out / "masks.udm"
    masks = stage_masks(models, bundle, path, args.global_mask)
    _write_manifest(out, "masks", None, {"masks": path})
    share = masks.masks.reshape(masks.n_models, -1).mean(axis=1)
    print("mask share per model: " + " ".join(f"{s:.3f}" for s in share))


def cmd_finetune(args):
    cfg = _config(args)
    models = load_model_set(args.models)
    masks = load_masks(args.masks)
    bundle = load_bundle(args.data)
    _check_masks(masks, models, bundle)
    out = _out(args)
    path = out / "finetuned.udm"
    stage_finetune(cfg, models, masks, bundle, path)
    _write_manifest(out, "finetune", cfg, {"finetuned": path})
    print(f"fine-tuned {len(models)} models -> {path}")


def cmd_distill(args):
    cfg = _config(args)
    models = load_model_set(args.models)
    masks = load_masks(args.masks)
    bundle = load_bundle(args.data)
    _check_masks(masks, models, bundle)
    out = _out(args)
    _, paths = stage_distill(cfg, models, masks, bundle, out)
    _write_manifest(out, "distill", cfg, paths)
    print(f"distilled one model per tile and one for all tiles -> {paths['distilled']}")


def cmd_evaluate(args):
    cfg = _config(args)
    models = load_model_set(args.models)
    bundle = load_bundle(args.data)
    out = _out(args)
    report, paths = stage_evaluate(cfg, models, bundle, out)
    _write_manifest(out, "evaluate", cfg, paths)
    sys.stdout.write(report.to_text())


def cmd_pipeline(args):
    """Dimension estimate, M and manifold size from it, train, masks, fine-tune, distill, evaluate."""
    cfg = _config(args)
    out = _out(args)
    artifacts = {}
    data_dir = out / "data"
    artifacts.update({f"data_{k}": p for k, p in stage_gen_data(cfg, data_dir).items()})
    bundle = load_bundle(data_dir)
    d_est = stage_estimate_dim(cfg, bundle)
    d_manifold = max(1, int(round(d_est)))
    n_comp = cfg.manifold.n_components or d_manifold
    n_models = args.models or cfg.train.n_models or d_manifold
    log.info("estimated dimension %.3f; manifold size %d; %d models", d_est, n_comp, n_models)

    artifacts["manifold"] = out / "manifold.udm"
    manifold = stage_fit_manifold(cfg, bundle, n_comp, artifacts["manifold"])
    models, history, paths = stage_train(cfg, bundle, manifold, n_models, args.workers, out)
    artifacts.update(paths)
    artifacts["masks"] = out / "masks.udm"
    masks = stage_masks(models, bundle, artifacts["masks"])
    extra_sets = {}
    if cfg.finetune.n_updates > 0:
        artifacts["finetuned"] = out / "finetuned.udm"
        extra_sets["finetuned"] = stage_finetune(cfg, models, masks, bundle, artifacts["finetuned"])
    if cfg.distill.enabled and n_models >= 2:
        base = extra_sets.get("finetuned", models)
        distilled, paths = stage_distill(cfg, base, masks, bundle, out)
        artifacts.update(paths)
        extra_sets["distilled"] = distilled
    report, paths = stage_evaluate(cfg, models, bundle, out, extra_sets)
    report.extra["intrinsic_dim_estimate"] = d_est
    report.extra["n_models"] = n_models
    paths["report_json"].write_text(report.to_json())
    paths["report_txt"].write_text(report.to_text())
    artifacts.update(paths)
    _write_manifest(out, "pipeline", cfg, artifacts,
                    {"intrinsic_dim_estimate": d_est, "n_models": n_models, "n_components": n_comp})
    sys.stdout.write(report.to_text())


def _check_masks(masks, models, bundle):
    if masks.masks.shape != (len(models), *bundle.train.inputs.shape):
        raise FileFormatError(f"mask shape {masks.masks.shape} does not match {len(models)} models "
                              f"and training data {bundle.train.inputs.shape}")


# -- argument parsing -----------------------------------------------------------

def build_parser():
    p = _Parser(prog="underspec", description="Diverse model sets under underspecification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the collage dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)

    sp = add("estimate-dim", cmd_estimate_dim, "estimate the intrinsic dimension of the pool")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--out")

    sp = add("fit-manifold", cmd_fit_manifold, "fit a PCA or autoencoder manifold on the pool")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", choices=("pca", "ae"))
    sp.add_argument("--components", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a set of models jointly")
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--manifold")
    sp.add_argument("--models", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = add("masks", cmd_masks, "compute gradient-magnitude masks on the training data")
    sp.add_argument("--models", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--global-mask", action="store_true")
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("finetune", cmd_finetune, "fine-tune each model on its masked data"),
                            ("distill", cmd_distill, "greedy pairwise distillation per tile and over all tiles")):
        sp = add(name, fn, help_)
        sp.add_argument("--config")
        sp.add_argument("--models", required=True)
        sp.add_argument("--masks", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "accuracy matrices and diagnostics")
    sp.add_argument("--config")
    sp.add_argument("--models", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "run every stage end to end")
    sp.add_argument("--config")
    sp.add_argument("--models", type=int, help="override M (default: estimated dimension)")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", required=True)
    return p


def run_command(argv):
    """Parse ``argv`` and run the command; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be >= 1")
        if getattr(args, "models", None) is not None and isinstance(args.models, int) and args.models < 1:
            raise UsageError("--models must be >= 1")
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ARGS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_ARGS
    except NumericalError as err:
        print(f"numerical failure in loss term '{err.term}': {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileFormatError, OSError) as err:
        print(f"file error: {err}", file=sys.stderr)
        return EXIT_FILE
    except UnderspecError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ARGS
    return 0


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
