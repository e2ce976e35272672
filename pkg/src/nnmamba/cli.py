"""``nnmamba`` command line.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration
error, 3 malformed data file.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, _jit, data, kernels
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigError, FormatError, NumericError
from .models import ModelConfig, build_model, canonical_task, mamba_placement
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3

HEADLINE = {"segmentation": "dice_mean", "classification": "auc", "landmark": "mre_mean"}
TASK_MODEL_DEFAULTS = {
    "segmentation": {"num_classes": data.SEG_CLASSES},
    "classification": {"num_classes": 2},
    "landmark": {"num_landmarks": len(data.LANDMARK_NAMES)},
}


# ---------------------------------------------------------------- config resolution


def _load_config_file(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    unknown = set(cfg) - {"task", "model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def resolve(args) -> dict:
    """Merge built-in defaults < config file < command-line flags."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    task = canonical_task(args.task or file_cfg.get("task") or "segmentation")

    model = {"task": task, **TASK_MODEL_DEFAULTS[task], **file_cfg.get("model", {})}
    model["task"] = task
    if getattr(args, "no_mamba", False):
        model["use_mamba"] = False
    if getattr(args, "stage_channels", None):
        try:
            model["stage_channels"] = [int(c) for c in args.stage_channels.split(",")]
        except ValueError:
            raise ConfigError(f"bad --stage-channels {args.stage_channels!r}") from None

    train_cfg = dict(file_cfg.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("weight_decay", "weight_decay"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg[key] = value

    data_cfg = {"task": task, **file_cfg.get("data", {})}
    data_cfg["task"] = task
    for flag, key in (("n_samples", "n_samples"), ("size", "shape"), ("noise", "noise")):
        value = getattr(args, flag, None)
        if value is not None:
            data_cfg[key] = (value,) * 3 if key == "shape" else value
    if args.seed is not None:
        data_cfg.setdefault("seed", args.seed)

    mcfg = ModelConfig.from_dict(model)
    tcfg = TrainConfig.from_dict(train_cfg).validate()
    try:
        dspec = data.DatasetSpec(**data_cfg).validate()
    except TypeError as e:
        raise ConfigError(f"bad data config: {e}") from None
    mcfg.input_spatial = tuple(dspec.shape)
    mcfg.validate()
    return {"model": mcfg, "train": tcfg, "data": dspec}


def version_string() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _apply_determinism(args):
    if getattr(args, "deterministic", False):
        _jit.set_threads(1)


def _datasets(args, resolved):
    """(train, val, test) from ``--data`` manifest, or generated in memory."""
    if getattr(args, "data", None):
        manifest, _ = data.load_manifest(args.data)
        if manifest.task != resolved["model"].task:
            raise ConfigError(f"manifest task {manifest.task!r} does not match {resolved['model'].task!r}")
        return tuple(data.load_split(args.data, which) for which in ("train", "val", "test"))
    spec = resolved["data"]
    return data.split(data.generate_dataset(spec), spec.ratios, spec.seed)


def _config_dump(resolved) -> dict:
    return {
        "model": json.loads(resolved["model"].to_json()),
        "train": resolved["train"].to_dict(),
        "data": resolved["data"].to_dict(),
    }


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    resolved = resolve(args)
    os.makedirs(args.out, exist_ok=True)
    manifest = data.write_dataset(resolved["data"], args.out)
    counts = {w: len(manifest.paths(w)) for w in ("train", "val", "test")}
    print(json.dumps({"manifest": os.path.join(args.out, "manifest.json"), **counts}))
    return EXIT_OK


def run_training(args, resolved, out_dir, tag: str = "") -> dict:
    """Train one model and write its checkpoint, log, config and manifest into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "checkpoint": os.path.join(out_dir, f"model{tag}.nmb"),
        "log": os.path.join(out_dir, f"train_log{tag}.csv"),
        "loss_curve": os.path.join(out_dir, f"loss_curve{tag}.dat"),
        "model_config": os.path.join(out_dir, f"model_config{tag}.json"),
        "metrics": os.path.join(out_dir, f"metrics{tag}.json"),
        "manifest": os.path.join(out_dir, f"run_manifest{tag}.json"),
    }
    run = {
        "command": "train",
        "version": version_string(),
        "seed": resolved["train"].seed,
        "deterministic": bool(getattr(args, "deterministic", False)),
        "data_source": os.path.abspath(args.data) if getattr(args, "data", None) else "generated",
        "config": _config_dump(resolved),
        "backend": kernels.BACKEND,
        "started": _now(),
        "finished": None,
        "outputs": paths,
    }
    _write_json(paths["manifest"], run)
    with open(paths["model_config"], "w") as fh:
        fh.write(resolved["model"].to_json() + "\n")

    train_set, val_set, test_set = _datasets(args, resolved)
    model = build_model(resolved["model"], seed=resolved["train"].seed)
    progress = None
    if not getattr(args, "quiet", False):
        def progress(row):
            print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  file=sys.stderr, flush=True)
    t0 = time.time()
    log = train(model, train_set, resolved["train"], val=val_set or None, log_path=paths["log"],
                progress=progress)
    # whitespace columns for `plot "loss_curve.dat" using 1:2 with lines`
    with open(paths["loss_curve"], "w") as fh:
        fh.write("# epoch loss\n")
        for row in log.rows:
            fh.write(f"{row['epoch']} {row['loss']!r}\n")
    save_tensors(paths["checkpoint"], model.state_dict())
    report = evaluate(model, test_set) if test_set else None
    result = {"test": report.to_dict() if report else None, "train_seconds": time.time() - t0,
              "mamba_placement": mamba_placement(model)}
    _write_json(paths["metrics"], result)
    run["finished"] = _now()
    _write_json(paths["manifest"], run)
    return result


def cmd_train(args) -> int:
    resolved = resolve(args)
    result = run_training(args, resolved, args.out)
    print(json.dumps(result["test"], indent=2) if result["test"] else "{}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.model_config:
        try:
            with open(args.model_config) as fh:
                mcfg = ModelConfig.from_json(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read model config: {e}") from None
    else:
        mcfg = resolve(args)["model"]
    try:
        state = load_tensors(args.checkpoint)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint: {e}") from None
    model = build_model(mcfg)
    try:
        model.load_state_dict(state)
    except KeyError as e:
        raise FormatError(f"checkpoint does not fit the model: {e}") from None
    model.astype(np.dtype(mcfg.dtype))
    if args.data:
        samples = data.load_split(args.data, args.split)
    else:
        spec = data.DatasetSpec(mcfg.task, args.n_samples or 20, mcfg.input_spatial,
                                0.1 if args.noise is None else args.noise, seed=args.seed or 0)
        samples = data.generate_dataset(spec)
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    report = evaluate(model, samples)
    print(report.to_json())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv_row(header=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_suite

    names = args.cases.split(",") if args.cases else list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown gradcheck cases {unknown}; known: {sorted(CASES)}")
    results = run_suite(names, range(args.seeds), args.tol)
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.rel_error)
    failed = sorted({r.name for r in results if not r.passed})
    for name in names:
        status = "FAIL" if name in failed else "ok"
        print(f"{name:28s} max_rel={worst[name]:.3e}  {status}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "gradcheck.json"),
                    {"tol": args.tol, "seeds": args.seeds, "worst": worst, "failed": failed})
    print(f"{len(names) - len(failed)}/{len(names)} cases passed over {args.seeds} seeds")
    return EXIT_RUNTIME if failed else EXIT_OK


def bench_scan(lengths, M: int, K: int, repeat: int, backends, seed: int = 0) -> list[dict]:
    """Tokens/second of the sequential and chunked linear-recurrence kernels.

    ``M`` independent lanes of ``K``-wide state (``M = channels``, ``K = state size``).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        a = rng.uniform(0.5, 1.0, size=(M, L, K))
        b = rng.normal(size=(M, L, K))
        for backend in backends:
            for mode, fn in (("sequential", kernels.sequential_scan), ("chunked", kernels.chunked_scan)):
                fn(a[:, :8], b[:, :8], backend=backend)  # warm-up / compile
                best = float("inf")
                for _ in range(repeat):
                    t = time.perf_counter()
                    fn(a, b, backend=backend)
                    best = min(best, time.perf_counter() - t)
                rows.append({"L": L, "backend": backend, "mode": mode, "seconds": best,
                             "tokens_per_sec": L / best})
    return rows


def cmd_scan_bench(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    backends = ["numpy"] + (["numba"] if _jit.JIT_ENABLED else [])
    rows = bench_scan(lengths, args.channels, args.state_size, args.repeat, backends, args.seed or 0)
    header = f"{'L':>7} {'backend':>7} {'mode':>10} {'tokens/s':>14}"
    print(header)
    for r in rows:
        print(f"{r['L']:>7} {r['backend']:>7} {r['mode']:>10} {r['tokens_per_sec']:>14.4g}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "scan_bench.csv"), "w") as fh:
            fh.write("L,backend,mode,seconds,tokens_per_sec\n")
            for r in rows:
                fh.write(f"{r['L']},{r['backend']},{r['mode']},{r['seconds']!r},{r['tokens_per_sec']!r}\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed or 0]
    metric = HEADLINE[resolve(args)["model"].task]
    rows = []
    for seed in seeds:
        for use_mamba in (True, False):
            args.seed = seed
            args.no_mamba = not use_mamba
            resolved = resolve(args)
            tag = f"_seed{seed}_{'mamba' if use_mamba else 'baseline'}"
            result = run_training(args, resolved, args.out, tag)
            rows.append({"seed": seed, "model": "mamba" if use_mamba else "baseline",
                         metric: result["test"]["values"][metric] if result["test"] else float("nan")})
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(f"seed,model,{metric}\n")
        for r in rows:
            fh.write(f"{r['seed']},{r['model']},{r[metric]!r}\n")
    lines = [f"| seed | mamba {metric} | baseline {metric} |", "|---|---|---|"]
    for seed in seeds:
        m = next(r[metric] for r in rows if r["seed"] == seed and r["model"] == "mamba")
        b = next(r[metric] for r in rows if r["seed"] == seed and r["model"] == "baseline")
        lines.append(f"| {seed} | {m:.4f} | {b:.4f} |")
    table = "\n".join(lines) + "\n"
    with open(os.path.join(args.out, "ablation.md"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p, out_required=True):
    p.add_argument("--task", choices=["seg", "cls", "landmark", "segmentation", "classification"])
    p.add_argument("--config", metavar="PATH", help="JSON file with model/train/data sections")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR", required=out_required)
    p.add_argument("--deterministic", action="store_true", help="single-threaded kernels")


def _data_flags(p):
    p.add_argument("--n-samples", type=int)
    p.add_argument("--size", type=int, help="cubic volume extent")
    p.add_argument("--noise", type=float)


def _train_flags(p):
    p.add_argument("--data", metavar="MANIFEST", help="dataset manifest from gen-data")
    p.add_argument("--no-mamba", action="store_true", help="drop every SSM layer (ablation)")
    p.add_argument("--stage-channels", metavar="C0,C1,...", help="encoder widths, e.g. 16,32,64,128")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--quiet", action="store_true")
    _data_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nnmamba", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its manifest")
    _common(p)
    _data_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-config", help="model_config.json written by train")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--no-mamba", action="store_true")
    p.add_argument("--stage-channels", metavar="C0,C1,...")
    _data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, out_required=False)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--cases", help="comma-separated subset")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scan-bench", help="sequential vs chunked scan throughput")
    _common(p, out_required=False)
    p.add_argument("--lengths", default="256,1024,4096,16384,65536")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--state-size", type=int, default=16)
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("ablate", help="train with and without SSM layers and compare")
    _common(p)
    _train_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_determinism(args)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"nnmamba: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"nnmamba: data format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, ArithmeticError) as e:
        print(f"nnmamba: numeric failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"nnmamba: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
