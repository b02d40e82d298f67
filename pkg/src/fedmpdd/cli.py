"""Command-line entry point: ``fedmpdd run | verify | attack | sweep``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import privacy
from .compressors import CompressorConfig, compress, decompress, RoundContext
from .config import ConfigError, ExperimentPlan, load_config, resolved_config
from .federation import run_experiment
from .models import Batch, evaluate, init_state, loss_and_grad
from .projection import derive_wire_seed
from .reporting import MetricsWriter, fmt, write_attack_csv, write_json, write_pgm

log = logging.getLogger("fedmpdd")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

N_SIGMA = 4.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# -- run ----------------------------------------------------------------------


def execute_plan(plan: ExperimentPlan, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", resolved_config(plan))
    train, test = plan.load_data()
    shards = plan.shards(train)
    init = init_state(plan.config.model, plan.config.master_seed, plan.init_scale)
    with MetricsWriter(out_dir / "metrics.csv") as writer:
        result = run_experiment(plan.config, train, shards, test, init, on_round=writer)
    final_loss, _ = evaluate(plan.config.model, result.state, train)
    _, final_acc = evaluate(plan.config.model, result.state, test if test is not None else train)
    summary = {
        "final_accuracy": final_acc,
        "final_train_loss": final_loss,
        "used_bytes": result.used_bytes,
        "rounds_run": len(result.records),
        "termination_reason": result.reason,
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def cmd_run(args) -> int:
    plan = load_config(args.config)
    summary = execute_plan(plan, Path(args.out))
    print(
        f"{summary['termination_reason']}: {summary['rounds_run']} rounds, "
        f"{summary['used_bytes']} bytes, accuracy {summary['final_accuracy']:.4f}"
    )
    return EXIT_OK


# -- verify -------------------------------------------------------------------


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise UsageError(f"cannot parse vector {text!r}") from None


def _row(name, target, est, se, ok):
    status = "info" if ok is None else ("PASS" if ok else "FAIL")
    se_txt = "" if se is None else f"{se:.4g}"
    return (name, f"{target:.6g}", f"{est:.6g}", se_txt, status)


def _est_row(name, e: privacy.Estimate):
    return _row(name, e.target, e.estimate, e.stderr, e.within(N_SIGMA))


def verify_rows(suite: str, args) -> list[tuple]:
    trials = args.trials
    rows = []
    if suite == "recon":
        d, m = args.d or 101, args.m or 10
        e = privacy.verify_relative_recon_error(d, m, trials=trials or 100_000, seed=args.seed)
        rows.append(_est_row(f"recon d={d} m={m}", e))
    elif suite == "variance":
        g = _parse_vector(args.g or "1,2")
        vg = privacy.verify_variance_gap(g, trials=trials or 1_000_000, seed=args.seed)
        for a in range(g.size):
            ok = abs(vg.gap[a] - vg.coordinate_target[a]) <= N_SIGMA * vg.stderr[a]
            rows.append(_row(f"variance gap [{a}]", vg.coordinate_target[a], vg.gap[a],
                             vg.stderr[a], ok))
        rows.append(_est_row("variance gap trace", vg.trace))
    elif suite == "rank":
        T, m, d = args.T or 3, args.m or 10, args.d or 50
        seeds = [derive_wire_seed(args.seed, t, 0) for t in range(T)]
        res = privacy.verify_multi_round_rank(seeds, m, d)
        target = min(T * m, d)
        rows.append(_row(f"rank T={T} m={m} d={d}", target, res["rank"], None,
                         res["rank"] == target))
        print(f"underdetermined={str(res['underdetermined']).lower()}")
    elif suite == "ldp":
        g = _parse_vector(args.g) if args.g else np.ones(4)
        tau = 1.0 if args.tau is None else args.tau
        n = trials or 100_000
        e = privacy.verify_ldp_relative_error(g, tau, trials=n, seed=args.seed)
        rows.append(_est_row(f"ldp relative error tau={tau:g}", e))
        flip_tau = 4 * np.linalg.norm(g) / math.sqrt(g.size)
        freq = privacy.ldp_flip_frequency(g, flip_tau, trials=n, seed=args.seed)
        p = 0.5 * math.erfc(math.sqrt(g.size) / 4 / math.sqrt(2))
        se = math.sqrt(p * (1 - p) / n)
        rows.append(_row("ldp descent flip freq", p, freq, se, abs(freq - p) <= N_SIGMA * se))
    elif suite == "jl":
        d = args.d or 512
        rep = privacy.verify_jl(d, args.eps, args.delta, args.c, trials=trials or 2000,
                                seed=args.seed)
        rows.append(_row(f"jl sketch within eps (m={rep.m})", 1 - rep.delta, rep.sketch_within,
                         None, rep.sketch_within >= 1 - rep.delta))
        rows.append(_est_row("backprojection 2nd moment", rep.backproj_second_moment))
        rows.append(_row("backprojection <= 1+eps", 1 - rep.delta, rep.backproj_within,
                         None, None))
    else:
        raise UsageError(f"unknown suite {suite!r}")
    return rows


def print_table(rows):
    header = ("check", "target", "estimate", "stderr", "result")
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(5)]
    for r in [header, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())


def cmd_verify(args) -> int:
    suites = ["recon", "variance", "rank", "ldp", "jl"] if args.suite == "all" else [args.suite]
    rows = []
    for suite in suites:
        rows.extend(verify_rows(suite, args))
    print_table(rows)
    return EXIT_OK if all(r[4] != "FAIL" for r in rows) else EXIT_RUNTIME


# -- attack -------------------------------------------------------------------


def run_attack(plan: ExperimentPlan, compressor: CompressorConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = plan.config
    model = cfg.model
    train, _ = plan.load_data()
    if plan.sample_index >= len(train):
        raise ConfigError("range", "/attack/sample_index", "sample index beyond the dataset")
    v = train.inputs[plan.sample_index]
    y = int(train.labels[plan.sample_index])
    state = init_state(model, cfg.master_seed, plan.init_scale)
    _, grad = loss_and_grad(model, state, Batch(v[None, :], [y]))
    msg = compress(compressor, grad, RoundContext(0, 0, cfg.master_seed))
    observed = decompress(compressor, msg, model.num_params)
    result = privacy.dlg_attack(model, state, observed, v, y, plan.attack)

    write_attack_csv(out_dir / "attack.csv", result.losses, result.mse_history)
    shape = privacy.image_shape(v.size) or (1, v.size)
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    write_pgm(out_dir / "reconstruction.pgm", ((result.reconstruction - lo) / span).reshape(shape))
    write_pgm(out_dir / "target.pgm", ((v - lo) / span).reshape(shape))
    summary = {
        "compressor": compressor.kind,
        "uplink_bytes": msg.byte_size,
        "input_mse": result.input_mse,
        "ssim": result.ssim,
        "final_matching_loss": min(result.losses),
        "iterations": len(result.losses),
    }
    write_json(out_dir / "summary.json", summary)
    return summary


def cmd_attack(args) -> int:
    plan = load_config(args.config)
    compressor = plan.config.compressor
    if args.compressor:
        try:
            compressor = CompressorConfig.parse(args.compressor)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad --compressor: {exc}") from None
    summary = run_attack(plan, compressor, Path(args.out))
    ssim_txt = "n/a" if summary["ssim"] is None else f"{summary['ssim']:.4f}"
    print(f"input_mse={summary['input_mse']:.6g} ssim={ssim_txt}")
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

_SWEEP_FIELD = {"m": ("mpdd", "m", int), "bits": ("qsgd", "bits", int),
                "tau": ("ldp_full", "scale", float)}


def _sweep_one(job):
    plan, value, out_dir = job
    return execute_plan(plan, out_dir)


def cmd_sweep(args) -> int:
    plan = load_config(args.config)
    if args.param not in _SWEEP_FIELD:
        raise UsageError(f"unknown sweep parameter {args.param!r}")
    kind, field, cast = _SWEEP_FIELD[args.param]
    if plan.config.compressor.kind != kind:
        raise UsageError(
            f"parameter {args.param!r} does not apply to compressor {plan.config.compressor.kind!r}"
        )
    texts = [t for t in (args.values or "").split(",") if t.strip()]
    if not texts:
        raise UsageError("no sweep values given")
    try:
        values = [cast(t) for t in texts]
    except ValueError:
        raise UsageError(f"cannot parse values {args.values!r}") from None

    out = Path(args.out)
    jobs = []
    for value in values:
        comp = replace(plan.config.compressor, **{field: value})
        raw = {**plan.raw, "compressor": {**plan.raw["compressor"], field: value}}
        sub = replace(plan, config=replace(plan.config, compressor=comp), raw=raw)
        jobs.append((sub, value, out / f"{args.param}={value}"))
    if args.parallel:
        with ProcessPoolExecutor() as pool:
            summaries = list(pool.map(_sweep_one, jobs))
    else:
        summaries = [_sweep_one(job) for job in jobs]

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "final_accuracy", "used_bytes"])
        for value, s in zip(values, summaries):
            w.writerow([value, fmt(s["final_accuracy"]), s["used_bytes"]])
            print(f"{args.param}={value}: accuracy {s['final_accuracy']:.4f}, {s['used_bytes']} bytes")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedmpdd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train one federated experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="Monte Carlo checks of the codec's statistics")
    p.add_argument("suite", choices=["all", "recon", "variance", "rank", "ldp", "jl"])
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--g", help="comma-separated gradient, e.g. 1,2")
    p.add_argument("--tau", type=float)
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--c", type=float, default=8.0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("attack", help="gradient inversion (DLG) against one sample")
    p.add_argument("--config", required=True)
    p.add_argument("--compressor", help="override, e.g. mpdd:m=4 or qsgd:bits=8")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="rerun an experiment over compressor settings")
    p.add_argument("--config", required=True)
    p.add_argument("--param", required=True, choices=sorted(_SWEEP_FIELD))
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"fedmpdd: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"fedmpdd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
