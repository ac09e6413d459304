"""Command-line entry point: gen-data, train, attack-sweep, evaluate, report, rerun.

Option values resolve as: command-line flag, then ``--config`` file key, then
(for ``seed`` only) the ``ROBUST_MTL_SEED`` environment variable, then the
built-in default. Config files are ``key = value`` lines with ``#`` comments.

Exit codes: 0 success, 1 I/O or data-format failure, 2 usage or
configuration error, 3 invariant violation during a run. Failures print one
line ``error: <kind>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .network import ConfigError, Model, ModelConfig
from .tensor import ContractError, TensorFormatError
from .synthdata import DataFormatError

MANIFEST = "manifest.json"
SEED_ENV = "ROBUST_MTL_SEED"


class UsageError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _path(text) -> str:
    return str(Path(text).resolve())


# name -> (parser, default, help); ``None`` default means required
OPTIONS = {
    "gen-data": {
        "seed": (int, 0, "scene seed"),
        "count": (int, 200, "number of triplets"),
        "out": (_path, None, "output directory"),
        "width": (int, 128, "image width"),
        "height": (int, 96, "image height"),
        "val_ratio": (float, 0.1, "validation fraction (floor rule)"),
        "test_ratio": (float, 0.1, "test fraction (floor rule)"),
        "jobs": (int, 1, "render processes"),
    },
    "train": {
        "data": (_path, None, "dataset directory"),
        "out": (_path, None, "output directory for checkpoint and logs"),
        "seed": (int, 0, "model and sampling seed"),
        "lam": (float, 0.5, "segmentation share of the encoder gradient"),
        "mode": (str, "multi", "multi, seg or depth"),
        "epochs": (int, 8, "epochs"),
        "decay_epoch": (int, -1, "epoch of the learning-rate drop (-1: 3/4 of epochs)"),
        "lr": (float, 1e-4, "initial learning rate"),
        "decayed_lr": (float, 1e-5, "learning rate after the drop"),
        "seg_batch": (int, 6, "labelled batch size"),
        "depth_batch": (int, 6, "triplet batch size"),
        "flip": (_bool, True, "random horizontal flips"),
        "brightness": (float, 0.2, "brightness jitter range"),
        "contrast": (float, 0.2, "contrast jitter range"),
        "encoder_widths": (_ints, (16, 32, 64, 128), "encoder channels per level"),
        "decoder_widths": (_ints, (8, 16, 24, 32), "decoder channels per level"),
        "max_steps": (int, -1, "stop after this many steps (-1: no limit)"),
    },
    "attack-sweep": {
        "family": (str, None, "gaussian, salt_pepper, fgsm or pgd"),
        "checkpoint": (_path, None, "checkpoint directory"),
        "data": (_path, None, "dataset directory"),
        "out": (_path, None, "output CSV"),
        "split": (str, "test", "dataset split to attack"),
        "eps_grid": (_floats, (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0), "comma-separated strengths"),
        "seed": (int, 0, "noise seed"),
        "clip": (_bool, False, "clip perturbed images to 0..255"),
        "labels": (str, "truth", "attack labels: truth or predicted"),
        "pgd_iters": (int, 10, "PGD iterations"),
        "pgd_step": (float, -1.0, "PGD step size (-1: eps/4)"),
        "jobs": (int, 1, "worker processes"),
    },
    "evaluate": {
        "checkpoint": (_path, None, "checkpoint directory"),
        "data": (_path, None, "dataset directory"),
        "out": (_path, None, "output CSV"),
        "split": (str, "test", "dataset split"),
        "seed": (int, 0, "unused; recorded for completeness"),
    },
    "report": {
        "out": (_path, None, "output SVG"),
    },
}


def parse_config_file(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command: str, flags: dict, config: dict | None = None, env=None) -> dict:
    """Merge flag > config > env (seed) > default for one subcommand."""
    env = os.environ if env is None else env
    spec = OPTIONS[command]
    config = config or {}
    unknown = sorted(set(config) - set(spec))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for name, (parse, default, _) in spec.items():
        if flags.get(name) is not None:
            value = flags[name]
        elif name in config:
            value = config[name]
        elif name == "seed" and env.get(SEED_ENV):
            value = env[SEED_ENV]
        elif default is None:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")
        else:
            value = default
        try:
            out[name] = parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-mtl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value config file")
        if command == "report":
            p.add_argument("csvs", nargs="+", help="sweep CSV files")
        for name, (_, default, text) in spec.items():
            suffix = " (required)" if default is None else f" (default {default})"
            p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, help=text + suffix)
    p = sub.add_parser("rerun", help="re-execute the runs recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--only", help="output name to re-run (default: all)")
    return parser


# -- manifests ---------------------------------------------------------------

def _sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def dataset_hash(directory) -> str:
    root = Path(directory)
    index = root / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"dataset index not found: {index}")
    files = [index]
    for line in index.read_text().splitlines()[1:]:
        cols = line.split(",")
        files += [root / cols[3], root / cols[4], root / cols[5]]
    return _sha256_files(files)


def checkpoint_hash(directory) -> str:
    root = Path(directory)
    return _sha256_files([root / "model.json", root / "model.tnsr"])


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _argv_for(command: str, resolved: dict, positional=()) -> list[str]:
    argv = [command, *positional]
    for name, value in resolved.items():
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        argv += ["--" + name.replace("_", "-"), str(value)]
    return argv


def write_manifest(directory, key: str, command: str, resolved: dict, inputs: dict,
                   started: str, positional=()) -> Path:
    """Record one run in the directory's single manifest (merging entries)."""
    path = Path(directory) / MANIFEST
    data = {"tool": "robust-mtl", "version": __version__, "runs": {}}
    if path.exists():
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
    data["version"] = __version__
    data.setdefault("runs", {})[key] = {
        "command": command,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in resolved.items()},
        "positional": list(positional),
        "argv": _argv_for(command, resolved, positional),
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# -- commands ----------------------------------------------------------------

def cmd_gen_data(o: dict) -> None:
    from .synthdata import SceneSpec, generate, write_dataset
    started = _now()
    if o["count"] < 1:
        raise ConfigError("count must be >= 1")
    spec = SceneSpec(seed=o["seed"], width=o["width"], height=o["height"])
    ratios = (1.0 - o["val_ratio"] - o["test_ratio"], o["val_ratio"], o["test_ratio"])
    if min(ratios) < 0:
        raise ConfigError("split ratios must be non-negative and sum to at most 1")
    ds = generate(spec, o["count"], ratios, jobs=o["jobs"])
    out = write_dataset(ds, o["out"])
    write_manifest(out, ".", "gen-data", o, {}, started)


def _train_config(o: dict):
    from .trainer import TrainConfig
    return TrainConfig(lam=o["lam"], lr=o["lr"], decayed_lr=o["decayed_lr"], epochs=o["epochs"],
                       decay_epoch=None if o["decay_epoch"] < 0 else o["decay_epoch"],
                       seg_batch=o["seg_batch"], depth_batch=o["depth_batch"], seed=o["seed"],
                       flip=o["flip"], brightness=o["brightness"], contrast=o["contrast"],
                       mode=o["mode"], max_steps=None if o["max_steps"] < 0 else o["max_steps"])


def cmd_train(o: dict) -> None:
    from .synthdata import read_dataset
    from .trainer import load_pools, train
    started = _now()
    cfg = _train_config(o)
    inputs = {"data": dataset_hash(o["data"])}
    images, labels, frames, K = load_pools(read_dataset(o["data"]), "train")
    model = Model(ModelConfig(encoder_widths=o["encoder_widths"], decoder_widths=o["decoder_widths"],
                              seed=o["seed"]))
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    train(model, images, labels, frames, K, cfg, log_path=out / "train_log.csv")
    model.save(out)
    write_manifest(out, ".", "train", o, inputs, started)


def _split_arrays(data_dir, split):
    from .synthdata import read_dataset
    ds = read_dataset(data_dir)
    x, y = ds.arrays(split)
    if len(x) == 0:
        raise ConfigError(f"dataset has no {split!r} images")
    return ds, x, y


def cmd_attack_sweep(o: dict) -> None:
    from .evaluation import run_sweep
    started = _now()
    inputs = {"data": dataset_hash(o["data"]), "checkpoint": checkpoint_hash(o["checkpoint"])}
    model = Model.load(o["checkpoint"])
    _, x, y = _split_arrays(o["data"], o["split"])
    options = {"clip": o["clip"], "label_mode": o["labels"]}
    if o["family"] == "pgd":
        options["pgd_iters"] = o["pgd_iters"]
        options["pgd_step"] = None if o["pgd_step"] <= 0 else o["pgd_step"]
    result = run_sweep(model, x, y, o["family"], o["eps_grid"], seed=o["seed"], jobs=o["jobs"], **options)
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_csv(out)
    write_manifest(out.parent, out.name, "attack-sweep", o, inputs, started)


def cmd_evaluate(o: dict) -> None:
    from .evaluation import evaluate, majority_miou, miou
    from .trainer import median_depth_error
    started = _now()
    inputs = {"data": dataset_hash(o["data"]), "checkpoint": checkpoint_hash(o["checkpoint"])}
    model = Model.load(o["checkpoint"])
    ds, x, y = _split_arrays(o["data"], o["split"])
    cm = evaluate(model, x, y)
    items = ds.split(o["split"])
    depth_err = median_depth_error(model, np.stack([t.center for t in items]),
                                   np.stack([t.depths[1] for t in items]))
    majority = majority_miou(y, model.config.num_classes)
    pixel_acc = float(cm.tp.sum() / cm.total)
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("split,num_images,miou,pixel_accuracy,majority_miou,median_depth_error\n"
                   f"{o['split']},{len(x)},{miou(cm)!r},{pixel_acc!r},{majority!r},{depth_err!r}\n")
    write_manifest(out.parent, out.name, "evaluate", o, inputs, started)


def cmd_report(o: dict, csvs: list[str]) -> None:
    from .evaluation import read_sweep_csv, render_svg
    started = _now()
    paths = [Path(p).resolve() for p in csvs]
    curves = [(p.stem, read_sweep_csv(p)) for p in paths]
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(curves))
    inputs = {str(p): _sha256_files([p]) for p in paths}
    write_manifest(out.parent, out.name, "report", o, inputs, started, positional=[str(p) for p in paths])


def cmd_rerun(manifest_path: str, only: str | None) -> int:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON manifest (offset {exc.pos})") from exc
    runs = data.get("runs", {})
    names = [only] if only else sorted(runs)
    for name in names:
        if name not in runs:
            raise ConfigError(f"{path}: no run recorded for {name!r}")
        code = main(runs[name]["argv"])
        if code:
            return code
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack-sweep": cmd_attack_sweep,
            "evaluate": cmd_evaluate}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown flags
    try:
        if args.command == "rerun":
            return cmd_rerun(args.manifest, args.only)
        config = parse_config_file(args.config) if args.config else {}
        flags = {name: getattr(args, name) for name in OPTIONS[args.command]}
        resolved = resolve(args.command, flags, config)
        if args.command == "report":
            cmd_report(resolved, args.csvs)
        else:
            COMMANDS[args.command](resolved)
    except ConfigError as exc:
        return _fail("config", exc, 2)
    except ContractError as exc:
        return _fail("invariant", exc, 3)
    except (DataFormatError, TensorFormatError) as exc:
        return _fail("format", exc, 1)
    except OSError as exc:
        return _fail("io", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
