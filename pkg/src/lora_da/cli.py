"""Command-line pipeline: toy data, pretraining, statistics, adapter
initialization, fine-tuning, validation suites and mode comparisons.

Conventions shared by every subcommand:

* key=value config files (``#`` comments) supply defaults; flags override
  them; unknown keys are rejected; the fully resolved configuration is
  echoed before any work starts.
* the seed resolves as flag > config file > ``LORA_DA_SEED`` env var > 0.
* output files are written atomically (temp file + rename) and are
  byte-reproducible for a fixed seed, except the explicitly volatile
  ``*.timing.csv`` wall-clock tables.
* exit codes: 0 ok, 1 failed validation checks, 2 I/O or file-format
  errors, 3 shape/missing-entry errors, 4 eigensolver non-convergence
  (output still written), 5 training divergence, 64 usage errors.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
from dataclasses import replace

from .bundle import BundleError, TensorBundle, read_bundle, write_bundle
from .guidance import (
    EigPath,
    GuidanceConfig,
    InitMode,
    InitResult,
    compute_init,
    mode_name,
    parse_mode,
)
from .mnist import Dataset, load_mnist_idx, split_odd_even, synthesize_digit_dataset, write_idx_files
from .stats import bundle_to_stats, stats_to_bundle
from .suites import SUITE_NAMES, run_suite
from .trainer import (
    MlpSpec,
    TrainConfig,
    TrainingDiverged,
    adapters_from_init,
    build_adapters_for_mode,
    collect_stats,
    compare_inits,
    default_adapters,
    finetune,
    model_from_bundle,
    model_to_bundle,
    pretrain,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_IO = 2
EXIT_SHAPE = 3
EXIT_NONCONVERGED = 4
EXIT_DIVERGED = 5
EXIT_USAGE = 64

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with the documented usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def read_config_file(path) -> dict[str, str]:
    """Parse key=value lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_options(args, parser_keys, config_path=None, given_argv=()):
    """Merge config-file values under explicit flags; reject unknown keys.

    A key set on the command line always wins; otherwise the config file
    value (parsed to the flag's type) replaces the built-in default.
    """
    merged = {k: getattr(args, k) for k in parser_keys}
    if config_path:
        file_values = read_config_file(config_path)
        unknown = sorted(set(file_values) - set(parser_keys))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        given = set(given_argv)
        for key, raw in file_values.items():
            if "--" + key.replace("_", "-") in given:
                continue
            current = merged[key]
            if isinstance(current, bool):
                merged[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                merged[key] = int(raw)
            elif isinstance(current, float):
                merged[key] = float(raw)
            else:
                merged[key] = raw
    return merged


def echo_config(command, options):
    print(f"# resolved config for {command}")
    for key in sorted(options):
        print(f"{key}={options[key]}")


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("LORA_DA_SEED")
    return int(env) if env else 0


def atomic_write_text(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_data_dir(data_dir) -> Dataset:
    images = os.path.join(data_dir, TRAIN_FILES[0])
    labels = os.path.join(data_dir, TRAIN_FILES[1])
    return load_mnist_idx(images, labels)


def split_from_config(data_dir, cfg: TrainConfig):
    data = load_data_dir(data_dir)
    return split_odd_even(data, cfg.n_odd, cfg.n_even, seed=cfg.seed)


_TRAIN_KEYS = (
    "rank lr batch_size epochs seed stats_samples alpha damping_scale "
    "grad_step_scale eval_every eval_max pretrain_lr pretrain_epochs "
    "pretrain_batch_size n_odd n_even"
).split()


def _add_train_flags(sub, defaults: TrainConfig):
    sub.add_argument("--rank", type=int, default=defaults.rank)
    sub.add_argument("--lr", type=float, default=defaults.lr)
    sub.add_argument("--batch-size", type=int, default=defaults.batch_size)
    sub.add_argument("--epochs", type=int, default=defaults.epochs)
    sub.add_argument("--stats-samples", type=int, default=defaults.stats_samples)
    sub.add_argument("--alpha", type=float, default=defaults.alpha)
    sub.add_argument("--damping-scale", type=float, default=defaults.damping_scale)
    sub.add_argument("--grad-step-scale", type=float, default=defaults.grad_step_scale)
    sub.add_argument("--eval-every", type=int, default=defaults.eval_every)
    sub.add_argument("--eval-max", type=int, default=defaults.eval_max)
    sub.add_argument("--pretrain-lr", type=float, default=defaults.pretrain_lr)
    sub.add_argument("--pretrain-epochs", type=int, default=defaults.pretrain_epochs)
    sub.add_argument("--pretrain-batch-size", type=int, default=defaults.pretrain_batch_size)
    sub.add_argument("--n-odd", type=int, default=defaults.n_odd)
    sub.add_argument("--n-even", type=int, default=defaults.n_even)


def _train_config(options) -> TrainConfig:
    return TrainConfig(**{k: options[k] for k in _TRAIN_KEYS})


def build_parser() -> _Parser:
    parser = _Parser(prog="lora-da", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    defaults = TrainConfig()

    p = subs.add_parser("make-toy-data", help="write a synthetic IDX digit dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train-n", type=int, default=24000)
    p.add_argument("--seed", type=int, default=None)

    p = subs.add_parser("pretrain", help="train the base model on odd digits")
    p.add_argument("--data", required=True, help="directory with the IDX train files")
    p.add_argument("--out", required=True, help="checkpoint bundle path")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p, defaults)

    p = subs.add_parser("stats", help="collect per-layer curvature statistics")
    p.add_argument("--model-checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--layers", default="all", help="comma-separated layer ids or 'all'")
    p.add_argument("--n-total", type=int, default=None,
                   help="total fine-tune set size N (defaults to the split size)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-even", type=int, default=defaults.n_even)
    p.add_argument("--n-odd", type=int, default=defaults.n_odd)

    p = subs.add_parser("init", help="compute adapter initializations from statistics")
    p.add_argument("--stats", required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--mode", default="full")
    p.add_argument("--damping", type=float, default=1e-4)
    p.add_argument("--eig-path", default="auto", choices=["auto", "dense", "lobpcg"])
    p.add_argument("--lobpcg-max-iter", type=int, default=500)
    p.add_argument("--checkpoint", default=None,
                   help="needed for the weight-SVD modes (pissa, milora)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1,
                   help="layers processed in parallel (default sequential)")
    p.add_argument("--seed", type=int, default=None)

    p = subs.add_parser("train", help="fine-tune adapters on even digits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init-bundle", default=None)
    p.add_argument("--mode", default=None, help="'default' for zero-start adapters")
    p.add_argument("--config", default=None)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--report", default=None, help="key=value report path")
    p.add_argument("--ranks", default=None,
                   help="comma-separated rank sweep; one metrics CSV per rank")
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p, defaults)

    p = subs.add_parser("validate", help="run the property-check suites")
    p.add_argument("--suite", default="all", choices=list(SUITE_NAMES) + ["all"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--report", default=None)

    p = subs.add_parser("compare", help="fine-tune once per init mode and rank")
    p.add_argument("--modes", required=True, help="comma-separated mode names")
    p.add_argument("--ranks", default=None, help="comma-separated ranks")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    _add_train_flags(p, defaults)
    return parser


def cmd_make_toy_data(args) -> int:
    seed = resolve_seed(args.seed)
    echo_config("make-toy-data", {"out": args.out, "train_n": args.train_n, "seed": seed})
    os.makedirs(args.out, exist_ok=True)
    data = synthesize_digit_dataset(args.train_n, seed=seed)
    write_idx_files(
        data,
        os.path.join(args.out, TRAIN_FILES[0]),
        os.path.join(args.out, TRAIN_FILES[1]),
    )
    print(f"wrote {args.train_n} images to {args.out}")
    return EXIT_OK


def _resolved_train_options(args, command, extra_keys=()):
    keys = _TRAIN_KEYS + ["data"] + [k for k in extra_keys if hasattr(args, k)]
    args.seed = resolve_seed(args.seed)
    options = resolve_options(
        args, keys, getattr(args, "config", None), given_argv=args.given_argv
    )
    options["seed"] = int(options["seed"])
    echo_config(command, options)
    return options


def cmd_pretrain(args) -> int:
    options = _resolved_train_options(args, "pretrain", extra_keys=("out",))
    cfg = _train_config(options)
    pre, _, _ = split_from_config(options["data"], cfg)
    model, acc = pretrain(MlpSpec(), pre, cfg)
    bundle = model_to_bundle(model, seed=cfg.seed)
    write_bundle(bundle, options["out"])
    print(f"pretrain accuracy on odd digits: {acc:.4f}")
    print(f"checkpoint written to {options['out']}")
    return EXIT_OK


def cmd_stats(args) -> int:
    args.seed = resolve_seed(args.seed)
    keys = ["model_checkpoint", "data", "samples", "layers", "n_total", "out",
            "seed", "n_odd", "n_even"]
    options = resolve_options(args, keys, args.config, given_argv=args.given_argv)
    if options["samples"] < 1:
        raise UsageError("--samples must be >= 1")
    echo_config("stats", options)
    model = model_from_bundle(read_bundle(options["model_checkpoint"]))
    cfg = replace(TrainConfig(), seed=int(options["seed"]), n_odd=options["n_odd"],
                  n_even=options["n_even"], stats_samples=options["samples"])
    _, fine, _ = split_from_config(options["data"], cfg)
    if options["layers"] == "all":
        layer_ids = list(range(model.spec.n_layers))
    else:
        layer_ids = [int(tok) for tok in str(options["layers"]).split(",") if tok.strip()]
    n_total = options["n_total"] if options["n_total"] is not None else len(fine)
    n = min(options["samples"], len(fine))
    try:
        stats = collect_stats(model, layer_ids, fine.subset(slice(0, n)), n_total=int(n_total))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    bundle = stats_to_bundle({str(k): v for k, v in stats.items()})
    write_bundle(bundle, options["out"])
    print(f"stats bundle written to {options['out']} "
          f"(layers {layer_ids}, sample_count {n}, n_total {n_total})")
    return EXIT_OK


def cmd_init(args) -> int:
    seed = resolve_seed(args.seed)
    if args.rank < 1:
        raise UsageError("--rank must be >= 1")
    try:
        mode = parse_mode(args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    options = {
        "stats": args.stats, "rank": args.rank, "mode": args.mode,
        "damping": args.damping, "eig_path": args.eig_path,
        "checkpoint": args.checkpoint, "out": args.out, "seed": seed,
    }
    echo_config("init", options)
    stats = bundle_to_stats(read_bundle(args.stats))
    weights = None
    if mode in (InitMode.PISSA, InitMode.MILORA):
        if not args.checkpoint:
            raise UsageError(f"mode {args.mode} requires --checkpoint")
        model = model_from_bundle(read_bundle(args.checkpoint))
        weights = {str(i): model.weights[i] for i in range(model.spec.n_layers)}

    out = TensorBundle(
        meta={
            "rank": args.rank,
            "mode": int(mode),
            "damping_scale": float(args.damping),
            "seed": seed,
        }
    )

    def init_one(layer_id):
        layer_stats = stats[layer_id]
        d1, d2 = layer_stats.dims
        gcfg = GuidanceConfig(
            rank=min(args.rank, min(d1, d2)), n_total=layer_stats.n_total,
            damping_scale=args.damping, mode=mode, eig_path=EigPath(args.eig_path),
            seed=seed, lobpcg_max_iter=args.lobpcg_max_iter,
        )
        w0 = weights[layer_id] if weights is not None else None
        return compute_init(layer_stats, gcfg, w0=w0)

    layer_order = sorted(stats)
    results: dict[str, InitResult] = {}
    try:
        if args.jobs > 1:
            # layers are independent pure computations; output order is fixed below
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                for layer_id, res in zip(layer_order, pool.map(init_one, layer_order)):
                    results[layer_id] = res
        else:
            for layer_id in layer_order:
                results[layer_id] = init_one(layer_id)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE

    all_converged = True
    n_total_seen = None
    for layer_id in layer_order:
        layer_stats = stats[layer_id]
        r = min(args.rank, min(*layer_stats.dims))
        res = results[layer_id]
        out.add(f"layer.{layer_id}.A0", res.a0)
        out.add(f"layer.{layer_id}.B0", res.b0)
        out.add(f"layer.{layer_id}.omega_eigvals", res.omega_eigvals)
        if res.w_residual is not None:
            out.add(f"layer.{layer_id}.Wres", res.w_residual)
        out.meta[f"layer.{layer_id}.converged"] = int(res.converged)
        all_converged &= res.converged
        n_total_seen = layer_stats.n_total
        eigs = ", ".join(f"{v:.6g}" for v in res.omega_eigvals)
        print(f"layer {layer_id}: {r} smallest guidance eigenvalues: [{eigs}]")
    out.meta["n_total"] = int(n_total_seen)
    out.meta["all_converged"] = int(all_converged)
    write_bundle(out, args.out)
    print(f"init bundle written to {args.out} (mode {mode_name(mode)})")
    if not all_converged:
        print("warning: eigensolver did not converge for at least one layer", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _adapters_from_bundle(bundle: TensorBundle, alpha: float):
    rank = int(bundle.meta["rank"])
    mode = InitMode(int(bundle.meta["mode"]))
    layer_ids = sorted(
        int(name.split(".")[1])
        for name in bundle.names()
        if name.startswith("layer.") and name.endswith(".A0")
    )
    results = {}
    for lid in layer_ids:
        a0 = bundle.get_matrix(f"layer.{lid}.A0")
        b0 = bundle.get_matrix(f"layer.{lid}.B0")
        eig = bundle.get_matrix(f"layer.{lid}.omega_eigvals")
        wres = None
        if bundle.has(f"layer.{lid}.Wres"):
            wres = bundle.get_matrix(f"layer.{lid}.Wres")
        results[lid] = InitResult(
            a0=a0, b0=b0, omega_eigvals=eig, mode=mode,
            orthonormal=mode not in (InitMode.PISSA, InitMode.MILORA),
            w_residual=wres,
        )
    return adapters_from_init(results, alpha=alpha), rank, mode


def cmd_train(args) -> int:
    if (args.init_bundle is None) == (args.mode is None):
        raise UsageError("give exactly one of --init-bundle or --mode")
    options = _resolved_train_options(
        args, "train", extra_keys=("checkpoint", "init_bundle", "mode", "metrics_out")
    )
    base_cfg = _train_config(options)
    model = model_from_bundle(read_bundle(options["checkpoint"]))
    _, fine, hold = split_from_config(options["data"], base_cfg)
    if args.ranks:
        ranks = [int(tok) for tok in args.ranks.split(",") if tok.strip()]
        if not ranks or any(r < 1 for r in ranks):
            raise UsageError("--ranks needs positive integers")
    else:
        ranks = [base_cfg.rank]
    sweep = len(ranks) > 1
    for rank in ranks:
        cfg = replace(base_cfg, rank=rank)
        init_seconds = 0.0
        if options["init_bundle"] is not None:
            if sweep:
                raise UsageError("--ranks sweeps rebuild the init; use --mode, not --init-bundle")
            adapters, _, mode = _adapters_from_bundle(
                read_bundle(options["init_bundle"]), cfg.alpha
            )
            mode_label = mode_name(mode)
        elif options["mode"] == "default":
            adapters = default_adapters(model, cfg.rank, cfg.alpha, seed=cfg.seed + 1)
            mode_label = "default"
        else:
            adapters, init_seconds = build_adapters_for_mode(model, options["mode"], cfg, fine)
            mode_label = options["mode"]
        try:
            metrics = finetune(model, adapters, fine, cfg, eval_data=hold)
        except TrainingDiverged as exc:
            print(f"error: training diverged at step {exc.step}", file=sys.stderr)
            return EXIT_DIVERGED
        metrics_path = options["metrics_out"]
        if sweep:
            stem, dot, ext = metrics_path.rpartition(".")
            metrics_path = f"{stem}.r{rank}.{ext}" if dot else f"{metrics_path}.r{rank}"
        atomic_write_text(metrics_path, "\n".join(metrics.csv_lines()) + "\n")
        report_lines = [f"mode={mode_label}", f"rank={cfg.rank}", f"seed={cfg.seed}"]
        report_lines += [f"{k}={v}" for k, v in metrics.report_items().items()]
        report_path = args.report or metrics_path + ".report"
        if sweep and args.report:
            report_path = f"{args.report}.r{rank}"
        atomic_write_text(report_path, "\n".join(report_lines) + "\n")
        atomic_write_text(
            metrics_path + ".timing.csv",
            f"init_seconds,train_seconds\n{init_seconds:.6f},{metrics.train_seconds:.6f}\n",
        )
        print(f"metrics written to {metrics_path}; report to {report_path}")
        print(f"rank {rank}: final accuracy {metrics.final_accuracy:.4f}, "
              f"step-0 loss {metrics.step0_loss:.6f}")
    return EXIT_OK


def cmd_validate(args) -> int:
    seed = resolve_seed(args.seed)
    echo_config("validate", {"suite": args.suite, "seed": seed, "report": args.report})
    checks = run_suite(args.suite, seed=seed)
    lines = [c.line() for c in checks]
    for line in lines:
        print(line)
    n_failed = sum(not c.passed for c in checks)
    summary = f"{len(checks) - n_failed}/{len(checks)} checks passed"
    print(summary)
    if args.report:
        atomic_write_text(args.report, "\n".join(lines + [summary]) + "\n")
    return EXIT_CHECK_FAILED if n_failed else EXIT_OK


def cmd_compare(args) -> int:
    modes = [tok.strip() for tok in args.modes.split(",") if tok.strip()]
    if not modes:
        raise UsageError("--modes must name at least one mode")
    ranks = None
    if args.ranks:
        ranks = [int(tok) for tok in args.ranks.split(",") if tok.strip()]
        if any(r < 1 for r in ranks):
            raise UsageError("ranks must be >= 1")
    options = _resolved_train_options(args, "compare", extra_keys=("out",))
    options.update(modes=",".join(modes), ranks=args.ranks)
    cfg = _train_config(options)
    pre, fine, hold = split_from_config(options["data"], cfg)
    rows = compare_inits(modes, cfg, pre, fine, hold, ranks=ranks)
    os.makedirs(args.out, exist_ok=True)

    table = ["mode,rank,status,step0_loss,final_loss,final_accuracy"]
    timing = ["mode,rank,init_seconds,train_seconds,total_seconds"]
    for row in rows:
        table.append(
            f"{row.mode},{row.rank},{row.status.split(':')[0]},"
            f"{row.step0_loss:.12g},{row.final_loss:.12g},{row.final_accuracy:.12g}"
        )
        timing.append(
            f"{row.mode},{row.rank},{row.init_seconds:.6f},"
            f"{row.train_seconds:.6f},{row.total_seconds:.6f}"
        )
    atomic_write_text(os.path.join(args.out, "comparison.csv"), "\n".join(table) + "\n")
    atomic_write_text(os.path.join(args.out, "timing.csv"), "\n".join(timing) + "\n")
    for line in table:
        print(line)
    print(f"comparison written to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "make-toy-data": cmd_make_toy_data,
    "pretrain": cmd_pretrain,
    "stats": cmd_stats,
    "init": cmd_init,
    "train": cmd_train,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.given_argv = argv
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BundleError as exc:
        print(f"bundle error: {exc}", file=sys.stderr)
        return EXIT_SHAPE if "missing" in str(exc) or "dims" in str(exc) else EXIT_IO
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
