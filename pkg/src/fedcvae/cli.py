"""Command line: the full pipeline, single stages, accountant queries and reports.

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime or numeric
error, 5 privacy-budget abort.

Environment overrides: FEDCVAE_OUTPUT_DIR (run directory) and
FEDCVAE_WORKERS (parallel clients per round). Flags win over both.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import FormatError, ValidationError, save_dataset, synth_blobs
from .numerics import SERVER_ID, Purpose, RngStream
from .pipeline import STAGES, MissingArtifact, StageError, dumps, read_json, run_experiment, run_stage, score_predictions
from .privacy import DEFAULT_ORDERS, PrivacyBudgetExceeded, calibrate_noise, compute_rdp, rdp_to_dp
from .reporting import ReportError, report_tables

log = logging.getLogger("fedcvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME, EXIT_BUDGET = 0, 2, 3, 4, 5


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, PrivacyBudgetExceeded):
        return EXIT_BUDGET
    if isinstance(exc, (FormatError, ValidationError, MissingArtifact, FileNotFoundError, StageError, ReportError)):
        return EXIT_DATA
    return EXIT_RUNTIME


def _emit(obj, out: str | None = None) -> None:
    text = dumps(obj)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _run_dir(args, cfg) -> Path:
    return Path(args.output_dir or os.environ.get("FEDCVAE_OUTPUT_DIR") or cfg["output_dir"])


def _workers(args, cfg) -> int:
    if args.workers is not None:
        w = args.workers
    elif os.environ.get("FEDCVAE_WORKERS"):
        try:
            w = int(os.environ["FEDCVAE_WORKERS"])
        except ValueError:
            raise ConfigError("FEDCVAE_WORKERS", "expected an integer") from None
    else:
        w = cfg["workers"]
    if w < 1:
        raise ConfigError("workers", "must be at least 1")
    return w


def parse_blobs(spec: str) -> dict:
    """``K=3,d=16,n=600,s=8`` -> dict; n is per class."""
    out = {"K": 3, "d": 16, "n": 600, "s": 8.0}
    for part in filter(None, spec.split(",")):
        key, _, val = part.partition("=")
        key = key.strip()
        if key not in out or not val:
            raise ConfigError("--blobs", f"bad entry {part!r}; expected K=,d=,n=,s=")
        try:
            out[key] = float(val) if key == "s" else int(val)
        except ValueError:
            raise ConfigError("--blobs", f"bad number in {part!r}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    metrics = run_experiment(cfg, _run_dir(args, cfg), _workers(args, cfg))
    log.info("wrote %s", _run_dir(args, cfg) / "metrics.json")
    summary = {k: {"mean": v["mean"], "std": v["std"]} for k, v in metrics["summary"].items()}
    _emit({"method": metrics["method"], "summary": summary})
    return EXIT_OK


def cmd_stage(args) -> int:
    if args.command == "gen-data" and args.blobs:
        b = parse_blobs(args.blobs)
        ds = synth_blobs(b["K"], b["d"], b["n"], b["s"], RngStream(args.seed, SERVER_ID, 0, Purpose.DATA))
        if not args.out:
            raise ConfigError("--out", "required with --blobs")
        save_dataset(ds, args.out)
        _emit({"path": args.out, "n": ds.n, "d": ds.d, "K": ds.K})
        return EXIT_OK
    if args.command == "evaluate" and args.predictions:
        scores = score_predictions(read_json(Path(args.predictions), "predictions file"))
        for key in ("acc", "bacc"):
            scores[key] = sum(c[key] for c in scores["clients"]) / len(scores["clients"])
        _emit(scores, args.out)
        return EXIT_OK
    if not args.config:
        raise ConfigError("--config", f"{args.command} needs --config (or its standalone flags)")
    cfg = load_config(args.config)
    run_stage(args.command, cfg, _run_dir(args, cfg), _workers(args, cfg))
    return EXIT_OK


def cmd_accountant(args) -> int:
    orders = DEFAULT_ORDERS
    if args.query == "rdp":
        if args.order is not None:
            orders = (args.order,)
        rdp = compute_rdp(args.q, args.sigma, args.steps, orders)
        _emit({"q": args.q, "sigma": args.sigma, "steps": args.steps, "orders": list(orders), "rdp": list(rdp)})
    elif args.query == "epsilon":
        rdp = compute_rdp(args.q, args.sigma, args.steps, orders)
        eps, order = rdp_to_dp(orders, rdp, args.delta)
        _emit({"q": args.q, "sigma": args.sigma, "steps": args.steps, "delta": args.delta,
               "epsilon": eps, "order": order})
    else:
        sigma = calibrate_noise(args.epsilon, args.delta, args.q, args.steps, orders)
        eps, order = rdp_to_dp(orders, compute_rdp(args.q, sigma, args.steps, orders), args.delta)
        _emit({"q": args.q, "steps": args.steps, "delta": args.delta, "epsilon_target": args.epsilon,
               "sigma": sigma, "epsilon": eps, "order": order})
    return EXIT_OK


def cmd_report(args) -> int:
    out = args.out or os.environ.get("FEDCVAE_OUTPUT_DIR") or "report"
    table = report_tables(args.runs, out)
    _emit({"out": str(out), "rows": [r["label"] for r in table["rows"]], "columns": table["columns"]})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcvae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="info-level logging on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_config=True):
        p.add_argument("--config", required=need_config, help="experiment YAML")
        p.add_argument("--output-dir", help="run directory (overrides FEDCVAE_OUTPUT_DIR and the config)")
        p.add_argument("--workers", type=int, help="parallel clients per round (overrides FEDCVAE_WORKERS)")

    p = sub.add_parser("run", help="every stage, every seed")
    common(p)
    p.set_defaults(fn=cmd_run)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"the {stage} stage only")
        common(p, need_config=False)
        if stage == "gen-data":
            p.add_argument("--blobs", help="standalone: Gaussian blobs, e.g. K=3,d=16,n=600,s=8 (n per class)")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out", help="standalone: output .femb or .csv path")
        if stage == "evaluate":
            p.add_argument("--predictions", help="standalone: predictions JSON to score")
            p.add_argument("--out", help="write the scores here instead of stdout")
        p.set_defaults(fn=cmd_stage)

    p = sub.add_parser("accountant", help="RDP accountant queries as JSON")
    p.add_argument("query", choices=("rdp", "epsilon", "calibrate"))
    p.add_argument("--q", type=float, required=True, help="Poisson sampling rate")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--sigma", type=float, help="noise multiplier (rdp, epsilon)")
    p.add_argument("--order", type=int, help="single RDP order (rdp)")
    p.add_argument("--delta", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1.0, help="target (calibrate)")
    p.set_defaults(fn=cmd_accountant)

    p = sub.add_parser("report", help="merge runs into tables and plot data")
    p.add_argument("runs", nargs="+", help="run directories, or a directory holding them")
    p.add_argument("--out", help="output directory (default: report)")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "accountant" and args.query in ("rdp", "epsilon") and args.sigma is None:
        print("error: --sigma is required for rdp and epsilon queries", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # mapped to the documented exit codes
        code = _exit_code(exc)
        kind = {EXIT_DATA: "data error", EXIT_BUDGET: "privacy budget exhausted"}.get(code, "error")
        print(f"{kind}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
