"""Operator CLI: pretrain, train, sweep, report, gradcheck, calibrate.

One JSON config drives everything; any key can be overridden on the
command line with ``--set dotted.key=value``. Exit codes: 0 success,
1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import oracle, presets, serialize
from .cascade import evaluate
from .errors import ConfigError, DataFormatError, NumericError, StopCascadeError
from .training import (
    calibrate_alpha,
    pretrain_classifiers,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stopcascade",
        description="Cascaded classifiers with trained stopping policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=need_out, help="output directory")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a dotted config key")

    p = sub.add_parser("pretrain", help="supervised warm-up of the classifiers")
    common(p)

    p = sub.add_parser("train", help="train stopping policies (and classifiers)")
    common(p)
    p.add_argument("--alpha", type=float, help="cost weight in the reward")
    p.add_argument("--mode", choices=["joint", "simplified"])
    p.add_argument("--cost-convention", choices=["inclusive", "exclusive"])
    p.add_argument("--reward-loss", choices=["zero_one", "log"])

    p = sub.add_parser("sweep", help="train/eval across a grid of cost weights")
    common(p)
    p.add_argument("--alphas", help="comma-separated cost weights")
    p.add_argument("--mode", choices=["joint", "simplified"])

    p = sub.add_parser("report", help="figure-ready CSVs from eval artifacts")
    common(p)
    p.add_argument("--runs", nargs="+", required=True,
                   help="run directories containing report.json")

    p = sub.add_parser("gradcheck", help="dual-route gradient and bias checks")
    common(p)

    p = sub.add_parser("calibrate", help="find the cost weight hitting a budget")
    common(p)
    p.add_argument("--budget", type=float, required=True,
                   help="target normalized amortized cost")
    return parser


def _resolve_config(args, shortcut_map=None):
    cfg = cfg_mod.load_config_file(args.config) if args.config else {}
    cfg = cfg_mod.with_defaults(cfg)
    cfg = cfg_mod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for attr, dotted in (shortcut_map or {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            node = cfg
            keys = dotted.split(".")
            for key in keys[:-1]:
                node = node.setdefault(key, {})
            node[keys[-1]] = value
    return cfg


def _prepare(cfg):
    full = cfg_mod.build_dataset(cfg)
    train_ds, test_ds = cfg_mod.build_splits(cfg, full)
    cascade = cfg_mod.build_cascade_from_config(cfg, full)
    return train_ds, test_ds, cascade


def _maybe_pretrain(cfg, cascade, train_ds):
    """Load a pretrain checkpoint or run the warm-up phase in place."""
    tr = cfg["train"]
    ckpt = tr.get("pretrain_checkpoint")
    if ckpt:
        loaded = serialize.load_cascade(ckpt)
        cascade.restore_from(loaded)
        return None
    epochs = int(tr.get("pretrain_epochs") or 0)
    if epochs > 0:
        return pretrain_classifiers(
            cascade, train_ds, epochs,
            lr=float(tr["classifier_lr"]),
            momentum=float(tr["momentum"]),
            batch_size=int(tr["batch_size"]),
            seed=int(cfg.get("seed", 0)),
            lr_drops=tuple(tr["classifier_lr_drops"]),
        )
    return None


def _write_config_artifact(out_dir, cfg):
    return serialize.write_json(Path(out_dir) / "config.json", cfg)


def _finish(out_dir, cfg, mode, artifacts):
    digest = cfg_mod.config_digest(cfg)
    manifest = serialize.write_manifest(out_dir, digest, int(cfg.get("seed", 0)),
                                        mode, artifacts)
    return manifest, digest


def cmd_pretrain(args):
    cfg = _resolve_config(args)
    cfg_mod.validate_config(cfg, require_alpha=False)
    if int(cfg["train"].get("pretrain_epochs") or 0) <= 0:
        raise ConfigError("pretrain needs train.pretrain_epochs > 0")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, _, cascade = _prepare(cfg)
    logs = pretrain_classifiers(
        cascade, train_ds, int(cfg["train"]["pretrain_epochs"]),
        lr=float(cfg["train"]["classifier_lr"]),
        momentum=float(cfg["train"]["momentum"]),
        batch_size=int(cfg["train"]["batch_size"]),
        seed=int(cfg["seed"]),
        lr_drops=tuple(cfg["train"]["classifier_lr_drops"]),
    )
    artifacts = [_write_config_artifact(out, cfg)]
    ckpt = out / "pretrained.ckpt"
    serialize.save_cascade(ckpt, cascade, cfg_mod.config_digest(cfg))
    artifacts.append(ckpt)
    artifacts.append(serialize.write_pretrain_metrics(out / "pretrain_metrics.csv", logs))
    _finish(out, cfg, "pretrain", artifacts)
    final = [rows[-1] for rows in logs]
    print("pretrain: " + "  ".join(
        f"C{r['classifier']} acc={r['accuracy']:.4f}" for r in final))
    return EXIT_OK


def _train_and_eval(cfg, cascade, train_ds, test_ds):
    tc = cfg_mod.build_train_config(cfg)
    metrics = train(cascade, train_ds, tc)
    report = evaluate(
        cascade, test_ds,
        seed=int(cfg["eval"]["seed"]),
        stop_rule=cfg["eval"]["stop_rule"],
        spec=tc.reward_spec(),
    )
    return tc, metrics, report


def cmd_train(args):
    cfg = _resolve_config(args, {
        "alpha": "train.alpha",
        "mode": "train.mode",
        "cost_convention": "train.cost_convention",
        "reward_loss": "train.reward_loss",
    })
    cfg_mod.validate_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, cascade = _prepare(cfg)
    _maybe_pretrain(cfg, cascade, train_ds)
    tc, metrics, report = _train_and_eval(cfg, cascade, train_ds, test_ds)
    artifacts = [_write_config_artifact(out, cfg)]
    ckpt = out / "cascade.ckpt"
    serialize.save_cascade(ckpt, cascade, cfg_mod.config_digest(cfg))
    artifacts.append(ckpt)
    artifacts.append(serialize.write_train_metrics(
        out / "train_metrics.csv", metrics, cascade.depth))
    artifacts.extend(serialize.write_eval_report(out, report))
    _finish(out, cfg, tc.mode, artifacts)
    print(f"train[{tc.mode}]: accuracy={report.accuracy:.4f} "
          f"amortized_flops={report.amortized_flops:.1f} "
          f"histogram={np.round(report.assignment_histogram, 3).tolist()}")
    return EXIT_OK


def _parse_alpha_list(raw):
    try:
        values = [float(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"bad --alphas list: {raw!r}")
    return values


def cmd_sweep(args):
    cfg = _resolve_config(args, {"mode": "train.mode"})
    alphas = (_parse_alpha_list(args.alphas) if args.alphas
              else list(cfg["sweep"]["alphas"]))
    if len(alphas) < 2:
        raise ConfigError("a sweep needs at least two alpha values")
    cfg.setdefault("train", {}).setdefault("alpha", alphas[0])
    cfg_mod.validate_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, cascade = _prepare(cfg)
    _maybe_pretrain(cfg, cascade, train_ds)
    snapshot = cascade.copy()
    artifacts = [_write_config_artifact(out, cfg)]
    rows = []
    depth = cascade.depth
    for i, alpha in enumerate(sorted(alphas)):
        run_cfg = cfg_mod.apply_overrides(cfg, [f"train.alpha={alpha!r}"])
        sub = out / f"alpha_{i:02d}"
        sub.mkdir(exist_ok=True)
        row = {"alpha": alpha, "status": "ok"}
        try:
            trial = snapshot.copy()
            tc, metrics, report = _train_and_eval(run_cfg, trial, train_ds, test_ds)
            sub_artifacts = [_write_config_artifact(sub, run_cfg)]
            sub_artifacts.append(serialize.write_train_metrics(
                sub / "train_metrics.csv", metrics, depth))
            sub_artifacts.extend(serialize.write_eval_report(sub, report))
            ckpt = sub / "cascade.ckpt"
            serialize.save_cascade(ckpt, trial, cfg_mod.config_digest(run_cfg))
            sub_artifacts.append(ckpt)
            artifacts.extend(sub_artifacts)
            row["accuracy"] = report.accuracy
            row["amortized_flops"] = report.amortized_flops
            for k in range(depth):
                row[f"stop_histogram_{k + 1}"] = report.assignment_histogram[k]
        except StopCascadeError as exc:
            row["status"] = "failed"
            row["accuracy"] = ""
            row["amortized_flops"] = ""
            for k in range(depth):
                row[f"stop_histogram_{k + 1}"] = ""
            print(f"sweep: alpha={alpha} failed: {exc}", file=sys.stderr)
        rows.append(row)
    columns = (["alpha", "status", "accuracy", "amortized_flops"]
               + [f"stop_histogram_{k + 1}" for k in range(depth)])
    artifacts.append(serialize.write_csv(out / "frontier.csv",
                                         "stopcascade.frontier.v1", columns, rows))
    _finish(out, cfg, cfg["train"]["mode"], artifacts)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"sweep: {ok}/{len(rows)} runs ok -> {out / 'frontier.csv'}")
    return EXIT_OK


def cmd_report(args):
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    frontier_rows = []
    for run in args.runs:
        run = Path(run)
        report_path = run / "report.json"
        config_path = run / "config.json"
        if not report_path.exists():
            raise DataFormatError(f"{report_path}: missing eval artifact")
        report = serialize.report_from_dict(serialize.load_json(report_path))
        alpha = ""
        if config_path.exists():
            alpha = serialize.load_json(config_path).get("train", {}).get("alpha", "")
        frontier_rows.append({
            "run": run.name,
            "alpha": alpha,
            "accuracy": report.accuracy,
            "amortized_flops": report.amortized_flops,
        })
        depth = len(report.assignment_histogram)
        hist_rows = [(k + 1, report.assignment_histogram[k]) for k in range(depth)]
        artifacts.append(serialize.write_csv(
            out / f"{run.name}_histogram.csv", "stopcascade.histogram.v1",
            ["k", "fraction"], hist_rows))
        matrix_rows = []
        for i in range(depth):
            for j in range(depth):
                v = report.accuracy_matrix[i, j]
                matrix_rows.append((
                    i + 1, j + 1,
                    "" if np.isnan(v) else repr(float(v)),
                    int(report.assignment_counts[j]),
                ))
        artifacts.append(serialize.write_csv(
            out / f"{run.name}_accuracy_matrix.csv",
            "stopcascade.accuracy_matrix.v1",
            ["k_i", "k_j", "accuracy", "count"], matrix_rows))
    frontier_rows.sort(key=lambda r: (r["alpha"] == "", r["alpha"], r["run"]))
    artifacts.append(serialize.write_csv(
        out / "frontier.csv", "stopcascade.frontier_report.v1",
        ["run", "alpha", "accuracy", "amortized_flops"], frontier_rows))
    _finish(out, cfg, "report", artifacts)
    print(f"report: wrote {len(artifacts)} CSVs to {out}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _resolve_config(args)
    gc = cfg["gradcheck"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cascade = presets.tiny_cascade()
    dataset = presets.tiny_dataset(n_per_tier=int(gc["n_samples"]) // 2)
    spec = presets.tiny_reward_spec()
    eps = float(gc["epsilon"])
    fd = oracle.exact_gradient_fd(cascade, dataset, spec, eps=eps)
    analytic = oracle.exact_gradient(cascade, dataset, spec)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1.0)
    rel_err = float(np.max(np.abs(fd - analytic) / denom))
    fd_ok = rel_err < float(gc["fd_tolerance"])
    n_rollouts = int(gc["n_rollouts"])
    bias0 = oracle.estimator_bias_check(cascade, dataset, spec, n_rollouts,
                                        seed=int(cfg["seed"]), baseline=0.0,
                                        reference=fd)
    mean_return = float(np.mean([
        r for r in oracle.exact_objective(cascade, dataset, spec)
        .per_sample_expected_reward]))
    bias_b = oracle.estimator_bias_check(cascade, dataset, spec, n_rollouts,
                                         seed=int(cfg["seed"]) + 1,
                                         baseline=mean_return, reference=fd)
    z_limit = float(gc["z_threshold"])
    z_ok = bias0.max_abs_z < z_limit and bias_b.max_abs_z < z_limit
    lines = [
        f"fd_vs_analytic_max_rel_err {rel_err!r} tolerance {gc['fd_tolerance']!r} "
        f"{'PASS' if fd_ok else 'FAIL'}",
        f"bias_z_b0 {bias0.max_abs_z!r} threshold {z_limit!r} "
        f"{'PASS' if bias0.max_abs_z < z_limit else 'FAIL'}",
        f"bias_z_baseline {bias_b.max_abs_z!r} threshold {z_limit!r} "
        f"{'PASS' if bias_b.max_abs_z < z_limit else 'FAIL'}",
    ]
    text = "\n".join(lines) + "\n"
    report_path = out / "gradcheck.txt"
    report_path.write_text(text)
    artifacts = [_write_config_artifact(out, cfg), report_path]
    _finish(out, cfg, "gradcheck", artifacts)
    print(text, end="")
    if not (fd_ok and z_ok):
        raise NumericError("gradient checks failed; see gradcheck.txt")
    return EXIT_OK


def cmd_calibrate(args):
    cfg = _resolve_config(args)
    cfg.setdefault("train", {}).setdefault("alpha", 1e-3)
    cfg_mod.validate_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, cascade = _prepare(cfg)
    _maybe_pretrain(cfg, cascade, train_ds)
    snapshot = cascade.copy()
    max_raw = float(cascade.raw_stage_costs.max())

    def run_fn(alpha):
        run_cfg = cfg_mod.apply_overrides(cfg, [f"train.alpha={alpha!r}"])
        trial = snapshot.copy()
        _, _, report = _train_and_eval(run_cfg, trial, train_ds, test_ds)
        return report.amortized_flops / max_raw

    cal = cfg["calibrate"]
    result = calibrate_alpha(
        run_fn,
        budget=float(args.budget),
        tolerance=float(cal["tolerance"]),
        bracket=tuple(cal["bracket"]),
        max_iters=int(cal["max_iters"]),
        cost_floor=float(cascade.cum_inclusive[0]),
        cost_ceiling=float(cascade.cum_inclusive[-1]),
    )
    artifacts = [_write_config_artifact(out, cfg)]
    artifacts.append(serialize.write_csv(
        out / "calibration_trace.csv", "stopcascade.calibration_trace.v1",
        ["iteration", "alpha", "cost"], result.trace))
    artifacts.append(serialize.write_json(out / "calibration.json", {
        "schema": "stopcascade.calibration.v1",
        "alpha": result.alpha,
        "achieved_cost": result.achieved_cost,
        "budget": float(args.budget),
        "converged": result.converged,
    }))
    _finish(out, cfg, "calibrate", artifacts)
    print(f"calibrate: alpha={result.alpha:.6g} "
          f"achieved_cost={result.achieved_cost:.4f} budget={args.budget}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "calibrate": cmd_calibrate,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
