"""Command-line entry point: ``mranet <command> [options]``.

Every option can also come from a ``key=value`` file passed with ``--config``;
flags given on the command line take precedence.  Before doing any work a
command writes its effective configuration to ``<out>/run_config.txt`` in the
same format, so ``mranet <command> --config <out>/run_config.txt`` replays it.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 for runtime
or numerical failures (including a gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .data import (
    DataError,
    TaskSpec,
    make_task_subset,
    prepare_image,
    read_manifest,
    scan_directory,
    stratified_split,
    write_manifest,
    write_synthetic_corpus,
)
from .gradcheck import STEP, run_suite
from .metrics import report
from .model import PRESETS, Model, preset
from .trainer import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    evaluate,
    fit,
    load_checkpoint,
    strict_mode,
    write_eval_outputs,
)

log = logging.getLogger("mranet")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
GRADCHECK_TOLERANCE = 1e-5


class UsageError(ValueError):
    """Invalid flag or config-file value."""


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    type: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple | None = None
    flag: bool = False


OPTIONS: dict[str, Option] = {
    # shared
    "seed": Option(int, 0, "root random seed"),
    "out": Option(str, ".", "output directory"),
    "preset": Option(str, "mranet-s", "model preset", tuple(PRESETS)),
    "task": Option(int, 3, "number of classes (2: colon, 3: lung, 5: all)", (2, 3, 5)),
    "strict": Option(_bool, False, "single-threaded, bitwise-reproducible execution", flag=True),
    # inputs
    "data_dir": Option(str, None, "directory with one subdirectory per class"),
    "manifest": Option(str, None, "manifest CSV (with a split column for train/eval)"),
    "checkpoint": Option(str, None, "checkpoint file written by train"),
    "predictions": Option(str, None, "predictions CSV to score instead of running a checkpoint"),
    "split": Option(str, "test", "split to evaluate", ("train", "val", "test")),
    "fractions": Option(str, "0.6,0.2,0.2", "train,val,test fractions"),
    # training
    "epochs": Option(int, 50, "number of epochs"),
    "learning_rate": Option(float, 1e-4, "Adam learning rate"),
    "batch_size": Option(int, 32, "mini-batch size"),
    "beta1": Option(float, 0.9, "Adam beta1"),
    "beta2": Option(float, 0.999, "Adam beta2"),
    "epsilon": Option(float, 1e-8, "Adam epsilon"),
    "dropout": Option(float, None, "dropout rate before the dense head (default: preset's)"),
    "checkpoint_every": Option(int, 5, "write ckpt_epochNNN.mrck every N epochs (0 disables)"),
    "workers": Option(int, 0, "image decoding threads (forced to 0 with --strict)"),
    "resume": Option(str, None, "checkpoint to resume training from"),
    # gradcheck
    "probes": Option(int, 2, "random coordinates probed per full-model tensor"),
    "model_tensors": Option(int, None, "check only this many evenly spaced full-model tensors"),
    "skip_model": Option(_bool, False, "check operators and modules only", flag=True),
    # synth
    "n_per_class": Option(int, 100, "images per class"),
    "size": Option(int, 32, "image side length in pixels"),
}

PATH_KEYS = ("out", "data_dir", "manifest", "checkpoint", "predictions", "resume")
SHARED = ("seed", "out", "preset", "task", "strict")
COMMANDS: dict[str, tuple[str, tuple[str, ...]]] = {
    "manifest": ("enumerate <data_dir>/<class>/* into manifest.csv", ("data_dir",)),
    "split": ("stratified train/val/test split of a manifest into split.csv", ("manifest", "fractions")),
    "train": (
        "train a model; writes train_log.csv, checkpoints and test metrics",
        ("manifest", "epochs", "learning_rate", "batch_size", "beta1", "beta2", "epsilon", "dropout",
         "checkpoint_every", "workers", "resume"),
    ),
    "eval": (
        "evaluate a checkpoint on a split, or score a predictions CSV",
        ("checkpoint", "manifest", "split", "predictions", "batch_size"),
    ),
    "predict": ("print path,pred_label,scores for each image", ("checkpoint", "batch_size")),
    "gradcheck": ("finite-difference check of every operator and the full network",
                  ("probes", "model_tensors", "skip_model")),
    "synth": ("write a labelled synthetic texture corpus plus manifest.csv", ("n_per_class", "size")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mranet", description="Residual attention network toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, own) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value file; flags override it")
        for key in SHARED + own:
            opt = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if opt.flag:
                p.add_argument(flag, dest=key, action="store_true", help=opt.help)
            else:
                p.add_argument(flag, dest=key, type=opt.type, choices=opt.choices,
                               help=opt.help if "default:" in opt.help else f"{opt.help} (default: {opt.default})")
        if name == "predict":
            p.add_argument("images", nargs="*", help="image files (P6 .ppm or NTSR)")
    return parser


def read_config_file(path, command: str) -> dict[str, Any]:
    allowed = set(SHARED + COMMANDS[command][1])
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"{path}: cannot read config file: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "command":
            if raw != command:
                raise UsageError(f"{path}:{lineno}: config was written for {raw!r}, not {command!r}")
            continue
        if key == "images" and command == "predict":
            values["images"] = [s for s in raw.split(",") if s]
            continue
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
        if raw in ("", "None"):
            values[key] = None
            continue
        opt = OPTIONS[key]
        try:
            value = opt.type(raw)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        if opt.choices and value not in opt.choices:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {list(opt.choices)}, got {value!r}")
        values[key] = value
    return values


def resolve(command: str, flags: dict[str, Any]) -> dict[str, Any]:
    """Defaults, then the config file, then command-line flags."""
    keys = SHARED + COMMANDS[command][1]
    cfg = {k: OPTIONS[k].default for k in keys}
    if command == "predict":
        cfg["images"] = []
    if flags.get("config"):
        cfg.update(read_config_file(flags["config"], command))
    cfg.update({k: v for k, v in flags.items() if k not in ("config", "command", "verbose")})
    for key in PATH_KEYS:
        if cfg.get(key):
            cfg[key] = str(Path(cfg[key]).resolve())
    return cfg


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(map(str, value))
    if isinstance(value, float):
        return repr(value)
    return "None" if value is None else str(value)


def write_run_config(command: str, cfg: dict[str, Any], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.txt"
    lines = [f"command={command}"] + [f"{k}={_format(cfg[k])}" for k in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(cfg, *keys) -> None:
    for key in keys:
        if not cfg.get(key):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _model_config(cfg):
    overrides = {} if cfg.get("dropout") is None else {"dropout_rate": cfg["dropout"]}
    return preset(cfg["preset"], cfg["task"], **overrides)


def _task_manifest(cfg, task: TaskSpec):
    manifest = read_manifest(cfg["manifest"])
    if any(s.split is None for s in manifest.samples):
        raise DataError(f"{cfg['manifest']}: no split column; run `mranet split` first")
    return make_task_subset(manifest, task)


def _load_model(cfg) -> Model:
    _require(cfg, "checkpoint")
    mcfg = _model_config(cfg)
    ckpt = load_checkpoint(cfg["checkpoint"], mcfg)
    return Model(mcfg, ckpt.params)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_manifest(cfg) -> int:
    _require(cfg, "data_dir")
    manifest = scan_directory(cfg["data_dir"])
    out = Path(cfg["out"]) / "manifest.csv"
    write_manifest(manifest, out, with_split=False)
    print(f"{out}: {len(manifest)} images")
    return EXIT_OK


def _fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--fractions: {exc}") from exc
    if len(parts) != 3:
        raise UsageError(f"--fractions needs three comma-separated values, got {text!r}")
    return parts


def cmd_split(cfg) -> int:
    _require(cfg, "manifest")
    manifest = stratified_split(read_manifest(cfg["manifest"]), _fractions(cfg["fractions"]), cfg["seed"])
    out = Path(cfg["out"]) / "split.csv"
    write_manifest(manifest, out, with_split=True)
    counts = manifest.split_counts()
    print(f"{out}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(cfg) -> int:
    _require(cfg, "manifest")
    task = TaskSpec.for_k(cfg["task"])
    config = TrainConfig(
        model=_model_config(cfg),
        task=task,
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        epsilon=cfg["epsilon"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        workers=0 if cfg["strict"] else cfg["workers"],
    )
    manifest = _task_manifest(cfg, task)
    start = time.perf_counter()
    trainlog, best = fit(config, manifest, cfg["out"], resume=cfg.get("resume"))
    last = trainlog.rows[-1] if trainlog.rows else None
    if last is not None:
        print(f"epoch {last.epoch}: train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}")
    print(f"best epoch {best.best_epoch} (val_acc={best.best_val_acc:.4f}); "
          f"{time.perf_counter() - start:.1f}s; outputs in {cfg['out']}")
    if trainlog.test is not None:
        print(f"test accuracy {trainlog.test.accuracy:.4f}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    task = TaskSpec.for_k(cfg["task"])
    out = Path(cfg["out"])
    if cfg.get("predictions"):
        rep, _ = report(cfg["predictions"], task.k, out, task.classes)
    else:
        _require(cfg, "checkpoint", "manifest")
        model = _load_model(cfg)
        result = evaluate(model, _task_manifest(cfg, task), cfg["split"], task, cfg["batch_size"])
        write_eval_outputs(result, task, out)
        rep, _ = report(out / "predictions.csv", task.k, None, task.classes)
    sys.stdout.write(rep.to_text(task.classes))
    return EXIT_OK


def cmd_predict(cfg) -> int:
    images = cfg.get("images") or []
    if not images:
        raise UsageError("predict needs at least one image path")
    model = _load_model(cfg)
    size = model.config.input_shape[1:]
    for start in range(0, len(images), cfg["batch_size"]):
        chunk = images[start : start + cfg["batch_size"]]
        batch = np.stack([prepare_image(p, size) for p in chunk])
        with no_grad():
            probs = model.forward(Tensor(batch), "infer").data.astype(np.float64)
        for path, row in zip(chunk, probs):
            print(",".join([path, str(int(row.argmax()))] + [f"{v:.6f}" for v in row]))
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    config = None if cfg["skip_model"] else _model_config(cfg)

    def progress(name, result):
        status = "ok" if result.passes(GRADCHECK_TOLERANCE) else "FAIL"
        where = f"{result.worst[0]}[{result.worst[1]}]" if result.worst else "-"
        print(f"{name:<28} max_rel_error={result.max_error:.3e}  worst={where}  {status}", flush=True)
        if result.failure:
            print(f"{name:<28} {result.failure}", flush=True)

    start = time.perf_counter()
    results = run_suite(config, cfg["seed"], model_probes=cfg["probes"], model_tensors=cfg["model_tensors"],
                        progress=progress)
    worst = max(r.max_error for r in results.values())
    print(f"overall max_rel_error={worst:.3e} (step {STEP:g}, tolerance {GRADCHECK_TOLERANCE:g}); "
          f"{time.perf_counter() - start:.1f}s")
    return EXIT_OK if all(r.passes(GRADCHECK_TOLERANCE) for r in results.values()) else EXIT_RUNTIME


def cmd_synth(cfg) -> int:
    if cfg["n_per_class"] < 1 or cfg["size"] < 2:
        raise UsageError("--n-per-class must be >= 1 and --size >= 2")
    out = Path(cfg["out"])
    manifest = write_synthetic_corpus(out, cfg["n_per_class"], cfg["seed"], cfg["size"])
    write_manifest(manifest, out / "manifest.csv", with_split=False)
    print(f"{out}: {len(manifest)} images, manifest.csv written")
    return EXIT_OK


HANDLERS: dict[str, Callable[[dict], int]] = {
    "manifest": cmd_manifest,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage; usage errors are validation failures here
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    flags = vars(args)
    command = flags["command"]
    logging.basicConfig(
        level=logging.DEBUG if flags.get("verbose") else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve(command, flags)
        # predict and gradcheck print their results, so they only echo the config when asked for --out
        if command not in ("predict", "gradcheck") or "out" in flags:
            write_run_config(command, cfg, Path(cfg["out"]))
        with strict_mode(cfg["strict"]):
            return HANDLERS[command](cfg)
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
