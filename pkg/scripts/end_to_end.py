"""Run the whole pipeline on a freshly generated synthetic session.

Generates a session, trains the forecaster, compiles it, evaluates accuracy,
scans for state dependence, replays both controller demos, and benchmarks
single-prediction latency -- all through the same CLI entry points a user
would call, so the artifacts in --out-dir mirror a real run.

Example:
    python scripts/end_to_end.py --out-dir /tmp/run --channels 10 \
        --trials 3000 --resting 1000
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tbfm import cli


def run(args: list[str]) -> None:
    print(f"$ tbfm {' '.join(args)}", flush=True)
    rc = cli.main(args)
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--channels", type=int, default=10)
    parser.add_argument("--trials", type=int, default=3000)
    parser.add_argument("--resting", type=int, default=1000)
    parser.add_argument("--n-test", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-perm", type=int, default=300)
    parser.add_argument("--bench-runs", type=int, default=2000)
    ns = parser.parse_args()

    out = Path(ns.out_dir)
    session = out / "session"
    run(
        [
            "gen",
            "--out-dir", str(out),
            "--seed", str(ns.seed),
            "--gen.n_channels", str(ns.channels),
            "--gen.n_trials", str(ns.trials),
            "--gen.n_resting", str(ns.resting),
        ]
    )
    run(
        [
            "train",
            "--out-dir", str(out / "train"),
            "--seed", str(ns.seed),
            "--train.session", str(session),
            "--train.n_test", str(ns.n_test),
        ]
    )
    run(
        [
            "compile",
            "--out-dir", str(out / "compile"),
            "--compile.model", str(out / "train" / "model"),
        ]
    )
    run(
        [
            "eval",
            "--out-dir", str(out / "eval"),
            "--eval.model", str(out / "compile" / "compiled"),
            "--eval.session", str(session),
            "--eval.n_test", str(ns.n_test),
        ]
    )
    run(
        [
            "statedep",
            "--out-dir", str(out / "statedep"),
            "--seed", str(ns.seed),
            "--statedep.session", str(session),
            "--statedep.n_perm", str(ns.n_perm),
            "--statedep.max_stim_trials", "500",
        ]
    )
    for demo in (1, 2):
        run(
            [
                "simulate",
                "--demo", str(demo),
                "--mode", "model",
                "--out-dir", str(out / f"demo{demo}"),
                "--seed", str(ns.seed),
                "--simulate.model", str(out / "compile" / "compiled"),
                "--simulate.session", str(session),
                "--simulate.n_test", str(ns.n_test),
            ]
        )
    run(
        [
            "bench",
            "--out-dir", str(out / "bench"),
            "--bench.model", str(out / "compile" / "compiled"),
            "--bench.n", str(ns.bench_runs),
            "--bench.warmup", str(max(ns.bench_runs // 10, 10)),
        ]
    )
    print(f"all artifacts under {out}", flush=True)


if __name__ == "__main__":
    main()
