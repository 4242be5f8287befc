"""Benchmark single-prediction latency at the deployment geometry.

Times the compiled forecaster, the uncompiled forecaster, and the recurrent
state-space baseline on the same geometry (default: 90 channels, 12 bases,
20-sample runway, 164-step horizon) and writes one JSON report per model
kind.  Weights do not affect timing, so models are freshly initialized
unless --model points at a saved model directory.

Example:
    python scripts/latency_report.py --out-dir /tmp/latency --runs 10000
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from tbfm.bench import hardware_descriptor, latency_bench
from tbfm.cli import load_any_model
from tbfm.lssm import LssmModel
from tbfm.model import TbfmModel, compile_model
from tbfm.sessiondata import ZScoreStats


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--model", default=None, help="saved model directory (optional)")
    parser.add_argument("--channels", type=int, default=90)
    parser.add_argument("--basis", type=int, default=12)
    parser.add_argument("--runway", type=int, default=20)
    parser.add_argument("--horizon", type=int, default=164)
    parser.add_argument("--runs", type=int, default=10000)
    parser.add_argument("--warmup", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    ns = parser.parse_args()

    out = Path(ns.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    descriptors = {1: (40, 70)}
    rng = np.random.default_rng(ns.seed)

    if ns.model is not None:
        model = load_any_model(ns.model)
        models = {"saved": model}
        descriptor_id = sorted(i for i in model.descriptors if i != 0)[0]
    else:
        zstats = ZScoreStats(mean=np.zeros(ns.channels), std=np.ones(ns.channels))
        model = TbfmModel.create(
            rng,
            n_channels=ns.channels,
            runway_len=ns.runway,
            horizon=ns.horizon,
            zstats=zstats,
            descriptors=descriptors,
            n_basis=ns.basis,
        )
        lssm = LssmModel.create(
            rng,
            n_channels=ns.channels,
            runway_len=ns.runway,
            horizon=ns.horizon,
            descriptors=descriptors,
            dtype=np.float32,
        )
        models = {"compiled": compile_model(model), "uncompiled": model, "lssm": lssm}
        descriptor_id = 1

    print(hardware_descriptor(), flush=True)
    summary = {}
    for name, m in models.items():
        report = latency_bench(m, descriptor_id, n=ns.runs, warmup=ns.warmup, seed=ns.seed)
        report.write_json(out / f"latency_{name}.json")
        summary[name] = report.mean_ms
        flag = " [noisy]" if report.noisy else ""
        print(
            f"{name:>10}: mean {report.mean_ms:.4f} ms, median {report.median_ms:.4f} ms,"
            f" std {report.std_ms:.4f} ms over {report.n_runs} runs{flag}",
            flush=True,
        )
    (out / "latency_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
