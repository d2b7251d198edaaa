"""Command-line entry point ``sparq-bandit``.

Exit codes: 0 success, 1 configuration or parse error, 2 numerical failure
(including any failed episode), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, load_config
from .environment import EnvironmentSpecError
from .gp import NumericalError
from .kernel import KernelError, KernelSpec, kernel_matrix
from .sparse import sample_mdpp_state

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sparq_bandit")


def _write_outputs(result: harness.BatchResult, out: Path, *, plot: bool, traces: bool):
    harness.emit_csv(result, out)
    if traces:
        harness.emit_traces([tr for trs in result.traces.values() for tr in trs], out / "traces")
    if plot:
        harness.emit_plot(result, result.bound, out / "regret.svg")
    kernel = result.config.kernel.to_dict() if result.config.kernel else None
    (out / "kernel.json").write_text(json.dumps(kernel, sort_keys=True) + "\n", encoding="utf-8")


def _report(result: harness.BatchResult):
    for tag, s in result.summaries.items():
        final = s.mean_avg_regret[-1]
        print(f"{tag:10s} episodes={s.n_episodes:3d} failed={s.n_failed} "
              f"mean_avg_regret@T={final:.6g} std={s.std_avg_regret[-1]:.3g}")
    for f in result.failures:
        print(f"FAILED {f.algorithm} seed={f.seed} step={f.step}: {f.message}", file=sys.stderr)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.algo:
        cfg = cfg.select([a for chunk in args.algo for a in chunk.split(",")])
    if args.seed is not None:
        cfg = replace(cfg, base_seed=args.seed)
    if args.realizations is not None:
        cfg = replace(cfg, realizations=args.realizations)
    result = harness.run_batch(cfg, progress=log.info)
    _write_outputs(result, Path(args.out or cfg.output_dir), plot=False, traces=True)
    _report(result)
    return EXIT_OK if result.ok else EXIT_NUMERICAL


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    result = harness.run_batch(cfg, progress=log.info)
    _write_outputs(result, Path(args.out), plot=True, traces=False)
    _report(result)
    return EXIT_OK if result.ok else EXIT_NUMERICAL


def cmd_dpp_sample(args) -> int:
    if args.n < 1 or not (1 <= args.m <= args.n) or args.iters < 0:
        raise ConfigError("need n >= 1, 1 <= m <= n and iters >= 0")
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(0.0, float(args.n), size=(args.n, 1))
    K = kernel_matrix(KernelSpec("se", args.lengthscale, 1.0), X)
    state = sample_mdpp_state(K, args.m, args.iters, rng)
    print("subset:", " ".join(str(int(i)) for i in sorted(state.selected)))
    print(f"logdet: {state.logdet!r}")
    print(f"accepted: {state.accepted}/{state.proposals}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.kernel if cfg.kernel is not None else harness.tune_kernel(cfg)
    print(json.dumps(spec.to_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparq-bandit", description="Time-varying GP bandits with expert queries.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run selected algorithms and write per-episode traces")
    r.add_argument("--config", required=True)
    r.add_argument("--algo", action="append", help="variant or tag; repeatable or comma separated")
    r.add_argument("--seed", type=int, help="override base_seed")
    r.add_argument("--realizations", type=int, help="override the episode count")
    r.add_argument("--out", help="output directory (default: output_dir from the config)")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="full batch for every algorithm, CSV and SVG output")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("dpp-sample", help="debug: M-DPP chain on random 1-D points")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--m", type=int, required=True)
    d.add_argument("--iters", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--lengthscale", type=float, default=1.0)
    d.set_defaults(func=cmd_dpp_sample)

    t = sub.add_parser("tune", help="print the kernel selected by marginal likelihood")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, which means numerical failure here
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, EnvironmentSpecError, KernelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, harness.EpisodeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
