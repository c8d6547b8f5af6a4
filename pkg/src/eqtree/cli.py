"""Command line entry point: ``eqtree {gen,train,eval,complete,gradcheck,experiment}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .datagen import AxiomError, Dataset, generate_dataset, load_axioms, split_dataset
from .gradcheck import run_gradcheck
from .models import ARCHS, CheckpointError, load_params, save_params
from .tasks import evaluate_completion, run_experiment
from .training import evaluate_model, train_model, write_metrics_csv

log = logging.getLogger("eqtree")

EXPERIMENTS = ("generalization", "extrapolation", "completion")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=_seed, metavar="U64", help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, metavar="N", help="worker processes")
    common.add_argument("--arch", choices=ARCHS, help="model architecture")
    common.add_argument("--use-funceval", type=_bool, metavar="{true,false}",
                        help="train on function evaluation data too")
    common.add_argument("--dataset", metavar="PATH", help="dataset file (overrides [paths])")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint file (overrides [paths])")
    common.add_argument("--out-dir", metavar="PATH", help="report directory (overrides [paths])")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="eqtree", description="Equation verification with tree models")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a dataset")
    g.add_argument("--axioms", metavar="PATH", help="axiom file (overrides [paths])")
    sub.add_parser("train", parents=[common], help="train a model on the train split")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    sub.add_parser("complete", parents=[common], help="equation completion on the test split")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    e = sub.add_parser("experiment", parents=[common], help="run a full experiment")
    e.add_argument("name", choices=EXPERIMENTS)
    return p


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Fold command line flags into the run config."""
    run, paths, training = cfg.run, cfg.paths, cfg.training
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be positive")
        run = replace(run, jobs=args.jobs)
    if args.arch is not None:
        run = replace(run, arch=args.arch)
    if args.use_funceval is not None:
        training = replace(training, use_funceval=args.use_funceval)
    for flag, key in (("dataset", "dataset"), ("checkpoint", "checkpoint"), ("out_dir", "out_dir"),
                      ("axioms", "axioms")):
        value = getattr(args, flag, None)
        if value is not None:
            paths = replace(paths, **{key: value})
    return replace(cfg, run=run, paths=paths, training=training).synced()


def _split(cfg: RunConfig, ds: Dataset):
    if cfg.run.split == "holdout":
        return split_dataset(ds, "holdout", depth=cfg.run.holdout_depth)
    return split_dataset(ds, "random", seed=cfg.run.seed)


def _warn(msg: str) -> None:
    bar = "!" * 72
    print(f"{bar}\nWARNING: {msg}\n{bar}", file=sys.stderr)


def _load_dataset(cfg: RunConfig) -> Dataset:
    path = Path(cfg.paths.dataset)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset.load(path)


def cmd_gen(cfg: RunConfig) -> int:
    axioms = load_axioms(cfg.paths.axioms or None, oracle=cfg.oracle)
    ds = generate_dataset(axioms, cfg.generation, cfg.oracle)
    Path(cfg.paths.dataset).parent.mkdir(parents=True, exist_ok=True)
    digest = ds.save(cfg.paths.dataset)
    st = ds.stats()
    print(f"wrote {len(ds)} equations to {cfg.paths.dataset} (sha256 {digest[:16]})")
    for kind in sorted(st["kinds"]):
        print(f"{kind}: {st['kinds'][kind]} equations")
        for key, n in st["by_depth"].items():
            k, d = key.split(":")
            if k == kind:
                c = st["correct_by_depth"].get(key, 0)
                print(f"  depth {d}: {n} equations ({c} correct, {n - c} incorrect)")
    print(f"correct {st['correct']} / {st['total']}")
    return 0


def _metrics_row(m, arch: str, epoch) -> dict:
    return m.row(epoch, "test", arch)


def cmd_train(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    train, test = _split(cfg, ds)
    res = train_model(train.equations, cfg.training, cfg.run.arch)
    m = evaluate_model(test.equations, res.params, res.tau)
    meta = {"dataset_digest": ds.digest(), "config_digest": cfg.training.digest(),
            "train_config": asdict(cfg.training), "split": cfg.run.split, "seed": cfg.run.seed,
            "holdout_depth": cfg.run.holdout_depth, "tau": res.tau, "best_epoch": res.best_epoch,
            "autoencoder_error": res.autoencoder_error}
    Path(cfg.paths.checkpoint).parent.mkdir(parents=True, exist_ok=True)
    digest = save_params(res.params, cfg.paths.checkpoint, meta)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(res.log) + [_metrics_row(m, cfg.run.arch, res.best_epoch)]
    write_metrics_csv(rows, out / "train_metrics.csv")
    print(f"checkpoint {cfg.paths.checkpoint} (sha256 {digest[:16]}), best epoch {res.best_epoch}")
    _print_metrics(m)
    return 0


def _print_metrics(m) -> None:
    print(f"test accuracy {m.accuracy:.4f} precision {m.precision:.4f} recall {m.recall:.4f} "
          f"funceval mse {m.mse:.4f}")


def _load_checked(cfg: RunConfig, ds: Dataset):
    params, meta = load_params(cfg.paths.checkpoint)
    if meta.get("dataset_digest") != ds.digest():
        _warn(f"dataset {cfg.paths.dataset} differs from the one {cfg.paths.checkpoint} was trained on")
    if meta.get("config_digest") != cfg.training.digest():
        _warn("training config differs from the checkpointed one")
    if meta.get("split") not in (None, cfg.run.split) or meta.get("seed") not in (None, cfg.run.seed):
        _warn("split settings differ from the checkpointed ones; test metrics are not comparable")
    return params, meta


def cmd_eval(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    params, meta = _load_checked(cfg, ds)
    _, test = _split(cfg, ds)
    m = evaluate_model(test.equations, params, meta.get("tau"))
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv([_metrics_row(m, params.arch, meta.get("best_epoch", ""))],
                      out / "eval_metrics.csv")
    _print_metrics(m)
    return 0


def cmd_complete(cfg: RunConfig) -> int:
    ds = _load_dataset(cfg)
    params, _ = _load_checked(cfg, ds)
    _, test = _split(cfg, ds)
    exp = cfg.experiment
    c = evaluate_completion(test.equations, params, seed=cfg.run.seed, k_max=exp.k_max,
                            oracle=cfg.oracle, max_instances=exp.completion_limit)
    out = Path(cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["k,accuracy,min_mse"]
    for k in range(1, exp.k_max + 1):
        acc, mse = c.accuracy[k - 1], c.min_mse[k - 1]
        lines.append(f"{k},{acc:.6f},{'' if mse != mse else f'{mse:.6f}'}")
    (out / "completion_topk.csv").write_text("\n".join(lines) + "\n")
    print(f"{c.n_symbolic} symbolic and {c.n_funceval} funceval instances, {c.skipped} skipped")
    print(f"top-1 accuracy {c.accuracy[0]:.4f}, top-{exp.k_max} accuracy {c.accuracy[-1]:.4f}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = run_gradcheck(cfg.run.gradcheck_configs, cfg.run.seed, cfg.run.gradcheck_max_dim)
    print(report.summary())
    return 0 if report.passed else 1


def cmd_experiment(cfg: RunConfig, name: str) -> int:
    ds = _load_dataset(cfg)
    reports = run_experiment(name, ds, cfg.training, cfg.experiment, cfg.paths.out_dir,
                             jobs=cfg.run.jobs)
    for fname in sorted(reports):
        print(Path(cfg.paths.out_dir) / fname)
    if f"{name}.csv" in reports:
        print(reports[f"{name}.csv"], end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "complete":
            return cmd_complete(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_experiment(cfg, args.name)
    except (ConfigError, AxiomError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"eqtree {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
