"""Command-line interface: synth / train / estimate / bench workflows.

All files a command writes are byte-deterministic under a fixed seed; wall
clock diagnostics (timing breakdowns, runtime shares) go to stderr only.
Commands exit 0 on success and nonzero with a single-line diagnostic on
failure. Configuration files (``--config``, ``key = value`` lines) supply
defaults that explicit flags override.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluation, formats, neural, training
from .engine import (
    EngineConfig,
    LEARNED_COMPONENTS,
    ca_ransac,
    essential_threshold,
    pixel_threshold,
)
from .geometry import ESSENTIAL, FUNDAMENTAL, MODEL_KINDS, PoseUndecidable
from .sampling import SamplerConfig
from .training import PairSpec, TrainConfig, engine_inputs

BENCH_METHODS = ("ca", "msac", "lmlo")


class CliError(Exception):
    """User-facing failure with a one-line diagnostic."""


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Fill flag defaults from --config; explicit flags keep priority."""
    if not getattr(args, "config", None):
        return
    values = formats.read_config(Path(args.config))
    casts = {
        "batches": int,
        "batch_size": int,
        "min_pool": int,
        "seed": int,
        "epochs": int,
        "top_k": int,
        "model_kind": str,
        "threshold_px": float,
        "pool_threshold": float,
        "learning_rate": float,
        "momentum": float,
        "weight_cutoff": float,
    }
    for key, raw in values.items():
        attr = key
        if not hasattr(args, attr):
            continue
        # a flag the user left at its parser default is overridable
        if getattr(args, attr) == parser_defaults.get(attr):
            try:
                setattr(args, attr, casts[key](raw))
            except ValueError:
                raise CliError(f"config value for {key!r} is not a valid {casts[key].__name__}")


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args: argparse.Namespace) -> int:
    if args.pairs <= 0:
        raise CliError("--pairs must be positive")
    out_dir = Path(args.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out_dir}: {exc.strerror}")
    rng = np.random.default_rng(args.seed)
    names = []
    for i in range(args.pairs):
        n = args.n if args.n_max is None else int(rng.integers(args.n, args.n_max + 1))
        spec = PairSpec(
            n=n,
            inlier_rate=args.inlier_rate,
            noise_sigma_px=args.noise,
            side_info_overlap=args.side_overlap,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        pair = training.generate_synthetic(spec)
        pair.name = f"pair_{i:04d}"
        formats.write_pair(out_dir, pair)
        names.append(pair.name)
    formats.write_manifest(out_dir / "manifest.txt", names)
    print(f"wrote {len(names)} pairs to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    dataset = formats.read_dataset(Path(args.data))
    for pair in dataset:
        if any(c.gt_inlier is None for c in pair.correspondences):
            raise CliError(f"pair {pair.name} has no ground-truth labels; train needs labeled data")
    val = formats.read_dataset(Path(args.val_data)) if args.val_data else None
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        seed=args.seed,
        model_kind=args.model_kind,
        batches=args.batches,
        batch_size=args.batch_size,
    )
    log_lines: list[str] = []

    def log(line: str) -> None:
        log_lines.append(line)
        print(line, file=sys.stderr)

    result = training.train(dataset, cfg, val=val, log=log)
    out = Path(args.out_weights)
    out.write_bytes(neural.save_weights(result.bundle))
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log")
    log_path.write_text("\n".join(log_lines) + "\n")
    print(f"wrote weights to {out}")
    return 0


# ---------------------------------------------------------------------------
# estimate


def _load_bundle(path: str | None) -> neural.MlpBundle:
    if not path:
        raise CliError("missing --weights; train a model first with 'caransac train'")
    p = Path(path)
    if not p.exists():
        raise CliError(f"weights file {p} not found; train a model first with 'caransac train'")
    return neural.load_weights(p.read_bytes())


def cmd_estimate(args: argparse.Namespace) -> int:
    data = formats.read_matches(Path(args.matches))
    calib = formats.read_calibration(Path(args.calib)) if args.calib else None
    if args.model_kind == ESSENTIAL and calib is None:
        raise CliError("--model-kind essential requires --calib")
    bundle = _load_bundle(args.weights)

    if args.model_kind == ESSENTIAL:
        from .geometry import normalize_by_intrinsics

        run_data = [normalize_by_intrinsics(c, *calib) for c in data]
        threshold = essential_threshold(args.threshold_px, *calib)
    else:
        run_data = data
        threshold = pixel_threshold(args.threshold_px)
    cfg = EngineConfig(
        batches=args.batches,
        batch_size=args.batch_size,
        model_kind=args.model_kind,
        msac_threshold=threshold,
        sampler=SamplerConfig(rng_seed=args.seed),
    )
    result = ca_ransac(run_data, None, bundle, cfg)

    pose = None
    if calib is not None and not result.model.is_zero:
        try:
            from .geometry import correspondence_arrays, decompose_essential_arrays, f_to_e_upgrade
            from .geometry import homogenize, normalize_points_by_intrinsics, sampson_sq_arrays

            model = result.model
            e = f_to_e_upgrade(model, *calib) if model.kind == FUNDAMENTAL else model
            p1, p2 = correspondence_arrays(data)
            p1n = normalize_points_by_intrinsics(p1, calib[0])
            p2n = normalize_points_by_intrinsics(p2, calib[1])
            thr = essential_threshold(args.threshold_px, *calib)
            mask = sampson_sq_arrays(e.m, homogenize(p1n), homogenize(p2n)) < thr
            if not mask.any():
                mask = np.ones(len(p1n), dtype=bool)
            pose = decompose_essential_arrays(e.m, p1n[mask], p2n[mask])
        except PoseUndecidable:
            pose = None

    report = formats.Report(
        kind=result.model.kind,
        model=result.model.m,
        pose=pose,
        per_batch_best_score=result.per_batch_best_score,
        inlier_probs=result.inlier_probs,
    )
    formats.write_report(Path(args.report), report)

    breakdown = result.timing_breakdown
    parts = " ".join(f"{k}={breakdown[k]*1e3:.1f}ms" for k in breakdown)
    print(f"timing: {parts}", file=sys.stderr)
    if args.timing_report:
        Path(args.timing_report).write_text(
            "\n".join(f"{k} {breakdown[k]!r}" for k in breakdown) + "\n"
        )
    print(f"wrote report to {args.report}")
    return 0


# ---------------------------------------------------------------------------
# bench


def _parse_budget(text: str) -> tuple[int, int]:
    try:
        batches, _, batch_size = text.partition("x")
        budget = (int(batches), int(batch_size))
    except ValueError:
        raise CliError(f"bad --budget {text!r}; expected e.g. 4x256")
    if budget[0] < 1 or budget[1] < 1:
        raise CliError("budget components must be positive")
    return budget


def cmd_bench(args: argparse.Namespace) -> int:
    dataset = formats.read_dataset(Path(args.data))
    budget = _parse_budget(args.budget)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise CliError("need at least one seed")
    requested = [m.strip() for m in args.methods.split(",") if m.strip()]
    for name in requested:
        if name not in BENCH_METHODS:
            raise CliError(
                f"unknown method {name!r}; valid methods: {', '.join(BENCH_METHODS)}"
            )
    methods: dict[str, evaluation.MethodFn] = {}
    for name in requested:
        if name == "ca":
            bundle = _load_bundle(args.weights)
            methods[name] = evaluation.make_ca_method(bundle, args.model_kind, args.threshold_px)
        elif name == "msac":
            methods[name] = evaluation.make_msac_method(args.model_kind, args.threshold_px)
        else:
            methods[name] = evaluation.make_lmlo_method(args.model_kind, args.threshold_px)

    reports = evaluation.benchmark(methods, dataset, budget, seeds)
    table = format_table(reports)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n")
    for name, report in reports.items():
        share = evaluation.learned_runtime_share(report.timing)
        total = report.timing.get("total", 0.0)
        print(
            f"{name}: learned components {share*100:.1f}% of {total:.2f}s total",
            file=sys.stderr,
        )
    return 0


def format_table(reports: dict[str, evaluation.MetricReport]) -> str:
    header = f"{'method':<8}{'AUC5':>8}{'AUC1':>8}{'MAP20':>8}{'Med':>9}{'Avg':>9}"
    rows = [header]
    for name, r in reports.items():
        rows.append(
            f"{name:<8}{r.auc5:>8.2f}{r.auc1:>8.2f}{r.map20:>8.2f}"
            f"{r.median_deg:>9.3f}{r.avg_deg:>9.3f}"
        )
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caransac",
        description="Consensus-adaptive robust two-view model estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--inlier-rate", dest="inlier_rate", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.5, help="pixel noise sigma")
    p.add_argument("--n", type=int, default=500, help="correspondences per pair")
    p.add_argument("--n-max", dest="n_max", type=int, default=None,
                   help="if set, per-pair n is uniform in [--n, --n-max]")
    p.add_argument("--side-overlap", dest="side_overlap", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the state networks on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", dest="val_data", default=None)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", dest="learning_rate", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-kind", dest="model_kind", choices=MODEL_KINDS, default=ESSENTIAL)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--out-weights", dest="out_weights", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate a two-view model from a matches file")
    p.add_argument("--matches", required=True)
    p.add_argument("--calib", default=None)
    p.add_argument("--model-kind", dest="model_kind", choices=MODEL_KINDS, default=FUNDAMENTAL)
    p.add_argument("--weights", default=None)
    p.add_argument("--batches", type=int, default=4)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    p.add_argument("--threshold-px", dest="threshold_px", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--timing-report", dest="timing_report", default=None,
                   help="optional wall-clock breakdown file (not deterministic)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="compare estimators on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="ca,msac,lmlo")
    p.add_argument("--budget", default="4x256")
    p.add_argument("--seeds", default="0")
    p.add_argument("--weights", default=None)
    p.add_argument("--model-kind", dest="model_kind", choices=MODEL_KINDS, default=ESSENTIAL)
    p.add_argument("--threshold-px", dest="threshold_px", type=float, default=1.5)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {
        action.dest: action.default
        for sub_action in parser._subparsers._group_actions  # type: ignore[union-attr]
        for sub_parser in sub_action.choices.values()  # type: ignore[union-attr]
        for action in sub_parser._actions
    }
    try:
        _apply_config(args, defaults)
        return args.func(args)
    except (
        CliError,
        formats.FileFormatError,
        neural.WeightFormatError,
        ValueError,
        RuntimeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
