"""Command-line entry point: ``vesselkit <command> [flags]``.

Each command resolves its settings as flags > ``--config`` file > defaults,
writes the resolved settings to ``<out>/config.json`` and keeps every output
under ``--out``.  Exit codes: 0 success, 1 invalid input, 2 failed check.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from vesselkit import __version__
from vesselkit import bench as benchmod
from vesselkit import gradcheck as gc
from vesselkit import network as net
from vesselkit.convolution import MODES
from vesselkit.metrics import (
    bifurcation_hit_or_miss,
    confusion,
    precision_recall_dice,
    threshold_probs,
)
from vesselkit.tasks import TASK_CHANNELS, TASKS, task_inputs
from vesselkit.vasculature import GrowthConfig, IntensityConfig, generate_dataset, load_manifest, load_tree
from vesselkit.volume import LabelVolume, Volume3D, read_volume, write_volume

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    """Invalid flags, config or inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


COMMON_DEFAULTS = {"out": None, "seed": 0, "threads": 1}

DEFAULTS = {
    "generate": {"n": 1, "shape": [64, 64, 64], "growth": {}, "intensity": {}},
    "train": {
        "data": None, "task": "vessel", "iters": 1000, "lr": 0.01, "decay": 0.99,
        "decay_every": 200, "patch": 64, "loss": "l1l2", "log_every": 5, "threshold": 0.5,
        "mode": "crosshair", "arch": "default", "hidden": "tanh", "init": None, "volumes": None,
    },
    "predict": {"checkpoint": None, "input": None, "extra": [], "threshold": 0.5},
    "eval": {"task": "vessel", "pred": [], "gt": [], "threshold": 0.5, "log": None},
    "bench": {"sizes": [32, 64], "kernels": [3, 5], "repeats": 5, "analytic_sizes": [128]},
    "gradcheck": {},
}


def _common(p):
    S = argparse.SUPPRESS
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="BLAS/OpenMP thread cap")
    p.add_argument("--config", default=S, help="JSON config file (flags override it)")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="vesselkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"vesselkit {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--shape", type=int, nargs="+", default=S, help="edge or three edges")

    p = sub.add_parser("train", help="train a network on a generated dataset")
    _common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--task", choices=TASKS, default=S)
    p.add_argument("--iters", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--decay", type=float, default=S)
    p.add_argument("--decay-every", type=int, default=S)
    p.add_argument("--patch", type=int, default=S)
    p.add_argument("--loss", choices=net.LOSSES, default=S)
    p.add_argument("--log-every", type=int, default=S)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--mode", choices=MODES, default=S)
    p.add_argument("--arch", choices=("default", "compact"), default=S)
    p.add_argument("--hidden", choices=("tanh", "relu"), default=S)
    p.add_argument("--init", default=S, help="checkpoint to start from")
    p.add_argument("--volumes", type=int, nargs="+", default=S, help="dataset indices to train on")

    p = sub.add_parser("predict", help="full-volume probability map and mask")
    _common(p)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--input", default=S)
    p.add_argument("--extra", nargs="+", default=S)
    p.add_argument("--threshold", type=float, default=S)

    p = sub.add_parser("eval", help="metrics of predictions against ground truth")
    _common(p)
    p.add_argument("--task", choices=TASKS, default=S)
    p.add_argument("--pred", nargs="+", default=S)
    p.add_argument("--gt", nargs="+", default=S, help="label volumes, or tree JSON for bifurcations")
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--log", default=S, help="training log CSV to copy into the report directory")

    p = sub.add_parser("bench", help="operation counts and timings")
    _common(p)
    p.add_argument("--sizes", type=int, nargs="+", default=S)
    p.add_argument("--kernels", type=int, nargs="+", default=S)
    p.add_argument("--repeats", type=int, default=S)
    p.add_argument("--analytic-sizes", type=int, nargs="+", default=S)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _common(p)
    return parser


def resolve_config(command: str, flags: dict) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    cfg = {"command": command, **COMMON_DEFAULTS, **DEFAULTS[command]}
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        if loaded.get("command", command) != command:
            raise UsageError(f"config is for {loaded['command']!r}, not {command!r}")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    if not cfg["out"]:
        raise UsageError("--out is required")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _write_config(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def _shape3(shape) -> tuple[int, int, int]:
    shape = [int(s) for s in (shape if isinstance(shape, (list, tuple)) else [shape])]
    if len(shape) == 1:
        shape *= 3
    if len(shape) != 3 or any(s < 2 for s in shape):
        raise UsageError(f"shape must be one or three integers >= 2, got {shape}")
    return tuple(shape)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    shape = _shape3(cfg["shape"])
    if cfg["n"] < 1:
        raise UsageError("--n must be >= 1")
    try:
        growth = GrowthConfig(**cfg["growth"]).for_shape(shape) if "domain_shape" not in cfg["growth"] \
            else GrowthConfig(**cfg["growth"])
        intensity = IntensityConfig(**cfg["intensity"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad generation config: {exc}") from exc
    manifest = generate_dataset(cfg["n"], growth, intensity, cfg["out"], seed=cfg["seed"])
    for e in manifest["volumes"]:
        fr = e["fractions"]
        print(f"vol {e['index']:03d} seed {e['seed']}: vessel {fr['vessel']:.4%} "
              f"centerline {fr['centerline']:.4%} bifurcation {fr['bifurcation']:.4%}")
    return EXIT_OK


def _load_training_set(cfg: dict):
    data = Path(cfg["data"] or "")
    if not cfg["data"] or not (data / "manifest.json").is_file():
        raise UsageError(f"no dataset manifest under {cfg['data']!r}")
    manifest = load_manifest(data)
    volumes = manifest["volumes"]
    indices = cfg["volumes"] if cfg["volumes"] is not None else [e["index"] for e in volumes]
    by_index = {e["index"]: e for e in volumes}
    dataset = []
    for i in indices:
        if i not in by_index:
            raise UsageError(f"dataset has no volume {i}")
        files = by_index[i]["files"]
        parts = {
            "image": read_volume(data / files["image"]),
            "vessel": read_volume(data / files["vessel"], "vessel"),
            "centerline": read_volume(data / files["centerline"], "centerline"),
        }
        task = cfg["task"]
        x = task_inputs(task, **parts)
        y = read_volume(data / files[task], task).data
        dataset.append((x, y))
    return dataset


def cmd_train(cfg: dict) -> int:
    task = cfg["task"]
    dataset = _load_training_set(cfg)
    try:
        tcfg = net.TrainConfig(
            base_lr=cfg["lr"], decay=cfg["decay"], decay_every=cfg["decay_every"],
            patch_size=cfg["patch"], iterations=cfg["iters"], loss_threshold=cfg["threshold"],
            log_every=cfg["log_every"], seed=cfg["seed"], loss=cfg["loss"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    channels = TASK_CHANNELS[task]
    if cfg["init"]:
        spec, params, _ = net.load_checkpoint(cfg["init"])
        if spec.in_channels != channels:
            raise UsageError(f"checkpoint expects {spec.in_channels} channels, task {task} has {channels}")
    else:
        build = net.NetworkSpec.default if cfg["arch"] == "default" else net.NetworkSpec.compact
        spec = build(mode=cfg["mode"], in_channels=channels, hidden=cfg["hidden"])
        params = net.init_parameters(spec, cfg["seed"])
    params, log = net.train(spec, params, dataset, tcfg)
    out = Path(cfg["out"])
    net.save_checkpoint(out / "model", spec, params, iteration=cfg["iters"],
                        meta={"task": task, "loss": cfg["loss"]})
    (out / "train_log.csv").write_text(log.to_csv())
    if log.entries:
        last = log.entries[-1]
        print(f"iter {last.iteration}: loss {last.total:.5f} precision {last.precision} "
              f"recall {last.recall} pr_ratio {last.pr_ratio}")
    return EXIT_OK


def _as_input_channel(vol) -> np.ndarray:
    return np.asarray(vol.data, dtype=np.float32)


def cmd_predict(cfg: dict) -> int:
    if not cfg["checkpoint"] or not cfg["input"]:
        raise UsageError("--checkpoint and --input are required")
    spec, params, header = net.load_checkpoint(cfg["checkpoint"])
    task = header.get("meta", {}).get("task")
    main = read_volume(cfg["input"])
    extras = [read_volume(p) for p in cfg["extra"]]
    if 1 + len(extras) != spec.in_channels:
        raise UsageError(f"checkpoint expects {spec.in_channels} channels, got {1 + len(extras)}")
    if task == "vessel":
        x = task_inputs("vessel", image=main)
    else:
        x = [_as_input_channel(main)] + [_as_input_channel(v) for v in extras]
    try:
        probs = Volume3D(net.forward(spec, params, x).astype(np.float32), main.spacing)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mask = threshold_probs(probs, cfg["threshold"], task if task in TASKS else "vessel")
    out = Path(cfg["out"])
    write_volume(probs, out / "prob")
    write_volume(mask, out / "mask")
    print(f"positive voxels: {int(mask.data.sum())} of {mask.data.size}")
    return EXIT_OK


def _pred_mask(path, threshold: float) -> np.ndarray:
    vol = read_volume(path)
    if isinstance(vol, LabelVolume):
        return vol.data.astype(bool)
    return np.asarray(vol.data) >= threshold


def _gt_points(path, shape) -> np.ndarray:
    tree = load_tree(path)
    pts = np.floor(tree.bifurcation_points() + 0.5)
    return np.clip(pts, 0, np.array(shape) - 1)


def _aggregate(rows: list[dict], keys) -> dict:
    agg = {}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        agg[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals \
            else {"mean": None, "std": None, "n": 0}
    return agg


def cmd_eval(cfg: dict) -> int:
    task = cfg["task"]
    preds, gts = cfg["pred"], cfg["gt"]
    if not preds or len(preds) != len(gts):
        raise UsageError("--pred and --gt need the same, non-zero number of paths")
    rows = []
    for p, g in zip(preds, gts):
        mask = _pred_mask(p, cfg["threshold"])
        if task == "bifurcation":
            rep = bifurcation_hit_or_miss(mask, _gt_points(g, mask.shape))
            rows.append({"pred": str(p), "gt": str(g), **rep.as_dict()})
        else:
            gt = read_volume(g, task)
            if gt.shape != mask.shape:
                raise UsageError(f"shape mismatch: {p} {mask.shape} vs {g} {gt.shape}")
            c = confusion(mask, gt)
            prec, rec, dice = precision_recall_dice(c)
            rows.append({"pred": str(p), "gt": str(g), "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                         "precision": prec, "recall": rec, "dice": dice})
    keys = ("precision", "recall", "detection_pct", "mean_err", "err_std") if task == "bifurcation" \
        else ("precision", "recall", "dice")
    report = {"task": task, "volumes": rows, "aggregate": _aggregate(rows, keys)}
    out = Path(cfg["out"])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg["log"]:
        shutil.copyfile(cfg["log"], out / "train_log.csv")
    for k, v in report["aggregate"].items():
        print(f"{k}: mean {v['mean']} std {v['std']}")
    return EXIT_OK


def cmd_bench(cfg: dict) -> int:
    sizes, kernels = cfg["sizes"], cfg["kernels"]
    if any(s < 1 for s in sizes + cfg["analytic_sizes"]) or any(k < 1 or k % 2 == 0 for k in kernels):
        raise UsageError("sizes must be positive and kernels odd")
    if cfg["repeats"] < 5:
        raise UsageError("--repeats must be >= 5")
    all_sizes = sorted(set(sizes) | set(cfg["analytic_sizes"]))
    analytic = [benchmod.analytic_row(s, k) for s in all_sizes for k in kernels]
    timings = [benchmod.timing_row(s, k, cfg["repeats"], cfg["seed"]) for s in sizes for k in kernels
               if k <= s]
    out = Path(cfg["out"])
    (out / "opcounts.json").write_text(json.dumps(analytic, indent=2) + "\n")
    # wall-clock numbers are the one output that is not reproducible
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    print(f"{'size':>5} {'k':>3} {'full3d mults':>14} {'crosshair mults':>16} {'ratio':>6}")
    for r in analytic:
        print(f"{r['size']:>5} {r['kernel']:>3} {r['full3d_mults']:>14,} {r['crosshair_mults']:>16,} "
              f"{r['mult_ratio']:>6.3f}")
    print(f"{'size':>5} {'k':>3} {'full3d s':>10} {'crosshair s':>12} {'ratio':>6}")
    for r in timings:
        print(f"{r['size']:>5} {r['kernel']:>3} {r['full3d_median_s']:>10.4f} "
              f"{r['crosshair_median_s']:>12.4f} {r['time_ratio']:>6.3f}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    results = gc.run_all(cfg["seed"])
    report = {"seed": cfg["seed"], "passed": all(r.passed for r in results),
              "checks": [r.as_dict() for r in results]}
    (Path(cfg["out"]) / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: max rel err {r.max_rel_err:.3e} "
              f"(tol {r.tol:g}, {r.n_checked} entries)")
        if not r.passed:
            for label, a, n, e in r.worst:
                print(f"    {label}: analytic {a:.6e} numeric {n:.6e} rel {e:.3e}")
    return EXIT_OK if report["passed"] else EXIT_CHECK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        _write_config(cfg)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"vesselkit {command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, ValueError) as exc:
        print(f"vesselkit {command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
