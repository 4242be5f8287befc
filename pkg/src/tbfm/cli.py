"""Command-line pipeline: generate, preprocess, train, compile, evaluate,
test state dependence, simulate controllers, and benchmark latency.

Configuration is a JSON document with one section per subcommand plus a
global ``seed`` and ``out_dir``; any field can be overridden on the command
line with dotted flags, e.g. ``--train.lambda 0.03`` (``lambda`` is accepted
as an alias for the ``lam`` field).  Unknown keys are rejected.  Every run
writes ``resolved_config.json`` and ``versions.json`` next to its outputs so
a run can be reproduced from the artifact directory alone.

Heavy imports happen after argument parsing so ``--threads`` can cap the
BLAS/OpenMP pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

SUBCOMMANDS = (
    "gen",
    "preprocess",
    "train",
    "fsam",
    "compile",
    "eval",
    "statedep",
    "simulate",
    "bench",
)

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "NUMBA_NUM_THREADS",
)


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------


def default_config() -> dict:
    from dataclasses import asdict

    from .lssm import LssmConfig
    from .synthgen import SynthConfig
    from .train import FsamConfig, TrainConfig

    def section(dc) -> dict:
        d = asdict(dc)
        d.pop("seed", None)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    train = section(TrainConfig())
    train.update(
        session=None, model="tbfm", state_agnostic=False, n_test=2500, lssm=section(LssmConfig())
    )
    fsam = section(FsamConfig())
    fsam.update(session=None, n_test=2500, n_val=1000)
    return {
        "seed": 0,
        "out_dir": None,
        "gen": {**section(SynthConfig()), "name": "session"},
        "preprocess": {
            "session": None,
            "out_name": "preprocessed",
            "notch": True,
            "bandpass": None,  # [low_hz, high_hz] to enable
        },
        "train": train,
        "fsam": fsam,
        "compile": {"model": None},
        "eval": {"model": None, "session": None, "n_test": 2500},
        "statedep": {
            "session": None,
            "n_perm": 1000,
            "channels": None,
            "max_stim_trials": None,
            "k": 4,
        },
        "simulate": {
            "demo": 1,
            "model": None,
            "session": None,
            "mode": "model",
            "channels": [0, 1],
            "n_test": 2500,
            "n_sources": 8,
            "eps_s": None,
        },
        "bench": {"model": None, "descriptor_id": None, "n": 10000, "warmup": 1000},
    }


_FIELD_ALIASES = {"lambda": "lam"}


def _merge_section(dst: dict, src: dict, path: str) -> None:
    for key, val in src.items():
        key = _FIELD_ALIASES.get(key, key)
        if key not in dst:
            raise ConfigError(f"unknown config key {path}{key}")
        if isinstance(dst[key], dict) and isinstance(val, dict):
            _merge_section(dst[key], val, f"{path}{key}.")
        else:
            dst[key] = val


def load_config(config_path: str | None) -> dict:
    cfg = default_config()
    if config_path is not None:
        try:
            user = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _merge_section(cfg, user, "")
    return cfg


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Set a dotted path like train.lambda from its command-line string."""
    parts = [_FIELD_ALIASES.get(p, p) for p in dotted.split(".")]
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {dotted}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings like tbfm or a file path
    node[leaf] = value


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            dotted, raw = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok} is missing a value")
            dotted, raw = body, extra[i + 1]
            i += 2
        pairs.append((dotted, raw))
    return pairs


def versions_dict() -> dict:
    import platform

    import numba
    import numpy
    import scipy

    from . import __version__

    return {
        "tbfm": __version__,
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "python": platform.python_version(),
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_metadata(out_dir: Path, cfg: dict, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "resolved_config.json", {"command": command, **cfg})
    _write_json(out_dir / "versions.json", versions_dict())


# -- shared plumbing ----------------------------------------------------------


def _require(sec: dict, key: str, command: str):
    if sec.get(key) in (None, ""):
        raise ConfigError(f"{command}.{key} must be set (config file or --{command}.{key})")
    return sec[key]


def _load_bundle(path: str):
    from .sessiondata import read_session_bundle

    return read_session_bundle(path)


def _test_split(stim, n_test: int):
    from .sessiondata import split_train_test

    return split_train_test(stim, stim.n_trials - n_test, n_test)


def load_any_model(path):
    """Load a model directory of any kind (uncompiled, compiled, or LSSM)."""
    p = Path(path)
    if (p / "compiled.json").exists():
        from .model import load_compiled

        return load_compiled(p)
    meta_path = p / "model.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no model.json or compiled.json under {p}")
    kind = json.loads(meta_path.read_text()).get("kind")
    if kind == "lssm":
        from .lssm import load_lssm

        return load_lssm(p)
    from .model import load_model

    return load_model(p)


# -- command handlers ----------------------------------------------------------


def cmd_gen(cfg: dict, out_dir: Path) -> None:
    from .synthgen import SynthConfig, generate_session, write_session_with_truth

    sec = dict(cfg["gen"])
    name = sec.pop("name")
    import numpy as np

    for key in ("state_gain", "state_gain2"):
        sec[key] = tuple(sec[key])
    for key in ("kernel", "kernel2", "channel_gain"):
        if sec[key] is not None:
            sec[key] = np.asarray(sec[key], dtype=np.float64)
    synth = SynthConfig(**sec, seed=cfg["seed"])
    session, truth = generate_session(synth)
    write_session_with_truth(out_dir / name, session, truth)
    print(f"wrote session bundle to {out_dir / name}")


def cmd_preprocess(cfg: dict, out_dir: Path) -> None:
    from dataclasses import replace

    from .sessiondata import (
        butterworth_bandpass,
        notch_filter,
        read_session_bundle,
        read_session_dir,
        session_descriptor_id,
        write_session_bundle,
        write_session_dir,
    )

    sec = cfg["preprocess"]
    src = Path(_require(sec, "session", "preprocess"))

    def transform(data):
        out = data.values
        if sec["notch"]:
            out = notch_filter(out, data.sample_rate_hz)
        if sec["bandpass"] is not None:
            low, high = sec["bandpass"]
            out = butterworth_bandpass(out, data.sample_rate_hz, low, high)
        return replace(data, values=out)

    dest = out_dir / sec["out_name"]
    if (src / "stim").is_dir():
        bundle = read_session_bundle(src)
        bundle = replace(
            bundle, stim=transform(bundle.stim), resting=transform(bundle.resting)
        )
        write_session_bundle(dest, bundle)
    else:
        write_session_dir(dest, transform(read_session_dir(src)), descriptor_id=session_descriptor_id(src))
    print(f"wrote preprocessed session to {dest}")


def cmd_train(cfg: dict, out_dir: Path) -> None:
    sec = cfg["train"]
    bundle = _load_bundle(_require(sec, "session", "train"))
    trainset, _ = _test_split(bundle.stim, sec["n_test"])
    if sec["model"] == "lssm":
        from .lssm import LssmConfig, save_lssm, train_lssm

        lssm_cfg = LssmConfig(**sec["lssm"], seed=cfg["seed"])
        model, log = train_lssm(lssm_cfg, trainset)
        save_lssm(out_dir / "model", model)
    elif sec["model"] == "tbfm":
        from .model import save_model
        from .train import TrainConfig, train, train_state_agnostic

        train_cfg = TrainConfig(
            n_basis=sec["n_basis"],
            lam=sec["lam"],
            lr=sec["lr"],
            max_epochs=sec["max_epochs"],
            batch_size=sec["batch_size"],
            weight_decay=sec["weight_decay"],
            plateau_window=sec["plateau_window"],
            plateau_tol=sec["plateau_tol"],
            hidden=tuple(sec["hidden"]),
            seed=cfg["seed"],
        )
        fit = train_state_agnostic if sec["state_agnostic"] else train
        model, log = fit(train_cfg, trainset)
        save_model(out_dir / "model", model)
    else:
        raise ConfigError(f"train.model must be tbfm or lssm, got {sec['model']!r}")
    _write_json(out_dir / "train_log.json", log.to_json_dict())
    print(
        f"trained {sec['model']} on {trainset.n_trials} trials in {log.wall_time_s:.1f}s"
        f" ({log.stopped_epoch} epochs); model at {out_dir / 'model'}"
    )


def cmd_fsam(cfg: dict, out_dir: Path) -> None:
    from .model import save_model
    from .sessiondata import split_train_test
    from .train import FsamConfig, train_fsam

    sec = cfg["fsam"]
    bundle = _load_bundle(_require(sec, "session", "fsam"))
    avail, _ = _test_split(bundle.stim, sec["n_test"])
    trainset, valset = split_train_test(avail, avail.n_trials - sec["n_val"], sec["n_val"])
    fsam_cfg = FsamConfig(
        b_max=sec["b_max"],
        epochs_per_stage=sec["epochs_per_stage"],
        lam=sec["lam"],
        lr=sec["lr"],
        batch_size=sec["batch_size"],
        weight_decay=sec["weight_decay"],
        plateau_window=sec["plateau_window"],
        plateau_tol=sec["plateau_tol"],
        val_r2_tol=sec["val_r2_tol"],
        hidden=tuple(sec["hidden"]),
        seed=cfg["seed"],
    )
    result = train_fsam(fsam_cfg, trainset, valset)
    save_model(out_dir / "model", result.model)
    _write_json(
        out_dir / "fsam_log.json",
        {
            "chosen_basis": result.chosen_basis,
            "val_r2": [round(float(v), 9) for v in result.val_r2],
            "stage_final_losses": [round(float(v), 12) for v in result.stage_final_losses],
            "train_log": result.log.to_json_dict(),
        },
    )
    print(f"FSAM kept {result.chosen_basis} bases; model at {out_dir / 'model'}")


def cmd_compile(cfg: dict, out_dir: Path) -> None:
    from .model import compile_model, load_model, save_compiled

    sec = cfg["compile"]
    model = load_model(_require(sec, "model", "compile"))
    save_compiled(out_dir / "compiled", compile_model(model))
    print(f"compiled model at {out_dir / 'compiled'}")


def cmd_eval(cfg: dict, out_dir: Path) -> None:
    import csv

    from .metrics import evaluate_model

    sec = cfg["eval"]
    model = load_any_model(_require(sec, "model", "eval"))
    bundle = _load_bundle(_require(sec, "session", "eval"))
    _, testset = _test_split(bundle.stim, sec["n_test"])
    report = evaluate_model(model, testset)
    _write_json(out_dir / "eval_report.json", report.to_json_dict())
    with (out_dir / "per_horizon.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon", "r2"])
        for h, val in enumerate(report.per_horizon, start=1):
            writer.writerow([h, f"{val:.9g}"])
    print(f"test R^2 {report.r2_full:.4f} over {report.horizon} steps ({report.n_trials} trials)")


def cmd_statedep(cfg: dict, out_dir: Path) -> None:
    import numpy as np

    from .statedep import state_dependence_scan, write_scan_csv

    sec = cfg["statedep"]
    bundle = _load_bundle(_require(sec, "session", "statedep"))
    stim = bundle.stim
    if sec["max_stim_trials"] is not None:
        stim = stim.subset(np.arange(min(sec["max_stim_trials"], stim.n_trials)))
    rows = state_dependence_scan(
        stim,
        bundle.resting,
        n_perm=sec["n_perm"],
        seed=cfg["seed"],
        channels=sec["channels"],
        k=sec["k"],
    )
    write_scan_csv(out_dir / "statedep.csv", rows)
    frac_ksg = sum(r.ksg_p < 0.05 for r in rows) / len(rows)
    frac_hsic = sum(r.hsic_p < 0.05 for r in rows) / len(rows)
    _write_json(
        out_dir / "statedep_summary.json",
        {
            "n_channels": len(rows),
            "n_trials_used": rows[0].n_trials_used if rows else 0,
            "frac_ksg_significant": frac_ksg,
            "frac_hsic_significant": frac_hsic,
            "alpha": 0.05,
        },
    )
    print(
        f"KSG significant on {frac_ksg:.1%} of channels, HSIC on {frac_hsic:.1%}"
        f" (alpha 0.05, {len(rows)} channels)"
    )


def cmd_simulate(cfg: dict, out_dir: Path) -> None:
    from .control import demo1_simulate, demo2_simulate, make_references, make_targets

    sec = cfg["simulate"]
    bundle = _load_bundle(_require(sec, "session", "simulate"))
    _, testset = _test_split(bundle.stim, sec["n_test"])
    channels = tuple(sec["channels"])
    mode = sec["mode"]
    model = load_any_model(_require(sec, "model", "simulate")) if mode == "model" else None
    if sec["demo"] == 1:
        task = make_targets(bundle.resting, testset, channels, seed=cfg["seed"])
        result = demo1_simulate(model, testset, task, mode=mode, seed=cfg["seed"])
    elif sec["demo"] == 2:
        refs = make_references(testset, channels, seed=cfg["seed"], n_sources=sec["n_sources"])
        result = demo2_simulate(
            model, testset, refs, eps_s=sec["eps_s"], mode=mode, seed=cfg["seed"]
        )
    else:
        raise ConfigError(f"simulate.demo must be 1 or 2, got {sec['demo']!r}")
    result.roc.write_csv(out_dir / "roc.csv")
    _write_json(
        out_dir / "summary.json",
        {
            "demo": sec["demo"],
            "mode": mode,
            "channels": list(channels),
            **result.roc.summary_dict(),
            **{k: v for k, v in result.extra.items() if k not in ("mode", "channels")},
        },
    )
    print(f"demo {sec['demo']} ({mode}) AUC {result.roc.auc:.4f} over {result.roc.n_trials} trials")


def cmd_bench(cfg: dict, out_dir: Path) -> None:
    from .bench import latency_bench

    sec = cfg["bench"]
    model = load_any_model(_require(sec, "model", "bench"))
    did = sec["descriptor_id"]
    if did is None:
        ids = sorted(model.descriptors)
        nonzero = [i for i in ids if i != 0]
        did = nonzero[0] if nonzero else ids[0]
    report = latency_bench(model, did, n=sec["n"], warmup=sec["warmup"], seed=cfg["seed"])
    report.write_json(out_dir / "bench_report.json")
    print(
        f"{report.model_kind}: mean {report.mean_ms:.4f} ms, median {report.median_ms:.4f} ms"
        f" over {report.n_runs} runs ({report.horizon}-step horizon)"
    )


_HANDLERS = {
    "gen": cmd_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "fsam": cmd_fsam,
    "compile": cmd_compile,
    "eval": cmd_eval,
    "statedep": cmd_statedep,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
}


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbfm",
        description="Temporal basis function forecasting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out-dir", default=None, help="output directory (default: $TBFM_OUT_DIR or .)")
        p.add_argument("--seed", type=int, default=None, help="global RNG seed")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP thread pools")
        if name == "simulate":
            p.add_argument("--demo", type=int, choices=(1, 2), default=None)
            p.add_argument("--mode", choices=("model", "oracle", "coinflip"), default=None)
    return parser


def main(argv=None) -> int:
    ns, extra = build_parser().parse_known_args(argv)
    if ns.threads is not None:
        for var in _THREAD_ENV_VARS:
            os.environ[var] = str(ns.threads)
    try:
        overrides = parse_overrides(extra)
        cfg = load_config(ns.config)
        if ns.seed is not None:
            cfg["seed"] = ns.seed
        if ns.out_dir is not None:
            cfg["out_dir"] = ns.out_dir
        if ns.command == "simulate":
            if ns.demo is not None:
                cfg["simulate"]["demo"] = ns.demo
            if ns.mode is not None:
                cfg["simulate"]["mode"] = ns.mode
        for dotted, raw in overrides:
            apply_override(cfg, dotted, raw)
        out_dir = Path(cfg["out_dir"] or os.environ.get("TBFM_OUT_DIR") or ".")
        write_run_metadata(out_dir, cfg, ns.command)
        _HANDLERS[ns.command](cfg, out_dir)
        return 0
    except Exception as exc:  # noqa: BLE001 — the CLI boundary reports, not raises
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
