"""``cmt`` command line: ingest, augment, bench, train, eval, cam.

Every command accepts ``--seed`` (default ``$CMT_SEED`` or 0), ``--config``
(flat JSON whose keys are flag names; explicit flags win) and ``--out``.
Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionConfig, measure_cost
from .errors import CmtError, ConfigError, DatasetError
from .ffa import FfaConfig, augment_dataset
from .imageio import is_image_file, read_image, resize_bilinear, to_rgb
from .interpret import grad_cam, write_overlay
from .metrics import binarize, confusion, printed_formulas, report
from .model import CmtConfig, init_params, load_checkpoint, toy_config
from .storage import atomic_write, dumps_line, write_jsonl
from .training import (
    Dataset,
    TrainConfig,
    make_toy_dataset,
    predict,
    toy_train_config,
    train_loop,
)

MIN_PER_CLASS = 10
DEFAULT_RESIZE = 360
TOY_SEED_OFFSET = 1000  # held-out toy set uses seed + offset

# per-command defaults; a --config file may set any of these keys
DEFAULTS = {
    "ingest": {"root": None},
    "augment": {"input": None, "count": 8, "p": 2, "alpha": 0.4, "m": None, "n": None},
    "bench": {"kind": "both", "c": 64, "hw": 24, "g": 2, "gp": 2, "heads": 4, "trials": 5, "backward": False},
    "train": {"toy": False, "index": None, "hw": None, "epochs": None, "lr_max": None, "batch": 16,
              "ffa_ratio": 1.0, "no_ffa": False, "p": 2, "alpha": 0.4, "attention": "mmsa", "encoders": None},
    "eval": {"checkpoint": None, "toy": False, "index": None, "split": "test", "hw": None,
             "threshold": 0.5, "paper_literal": False},
    "cam": {"checkpoint": None, "image": None, "toy": False, "toy_index": 0, "class_k": None, "hw": None},
}


# ---------------------------------------------------------------- helpers


def emit(record: dict) -> None:
    sys.stdout.write(dumps_line(record))


def write_json(path: Path, obj) -> Path:
    return atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())


def required_divisor(model: CmtConfig, ffa_p: Optional[int] = None) -> int:
    """Input sizes must be multiples of this for the extractor, the attention grids and FFA patches."""
    att = model.attention
    div = model.cife.total_stride * math.lcm(att.g, att.g_prime)
    return math.lcm(div, ffa_p) if ffa_p else div


def resolve_hw(hw: Optional[int], divisor: int) -> int:
    """An explicit size must divide exactly; the default is rounded to the nearest valid multiple."""
    if hw is not None:
        if hw < divisor or hw % divisor:
            raise ConfigError(f"--hw {hw} must be a positive multiple of {divisor}")
        return hw
    rounded = max(divisor, divisor * round(DEFAULT_RESIZE / divisor))
    if rounded != DEFAULT_RESIZE:
        warnings.warn(f"default resize {DEFAULT_RESIZE} is not a multiple of {divisor}; using {rounded}",
                      stacklevel=2)
    return rounded


def load_run_config(checkpoint: Path) -> dict:
    path = checkpoint.parent / "config.json"
    if not path.exists():
        raise DatasetError(f"{path} not found next to the checkpoint")
    return json.loads(path.read_text())


def load_model(checkpoint: Path):
    run = load_run_config(checkpoint)
    cfg = CmtConfig.from_dict(run["model"])
    params, _ = load_checkpoint(checkpoint, cfg)
    return cfg, params, run


def load_index_split(index_path: Path, split: str, hw: int) -> Dataset:
    index = json.loads(Path(index_path).read_text())
    classes = index["classes"]
    root = Path(index["root"])
    images, labels = [], []
    for k, name in enumerate(classes):
        for rel in index["splits"][split][name]:
            images.append(resize_bilinear(to_rgb(read_image(root / name / rel)), hw, hw))
            labels.append(np.eye(len(classes))[k])
    if not images:
        raise DatasetError(f"split {split!r} of {index_path} is empty")
    return Dataset(np.stack(images), np.stack(labels), tuple(classes))


# ---------------------------------------------------------------- commands


def cmd_ingest(a) -> dict:
    """Stratified 8:1:1 split of ``root/<class>/*`` with a seeded shuffle per class."""
    if a.root is None:
        raise ConfigError("ingest needs --root")
    root = Path(a.root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"{root} has no class subdirectories")
    seen, splits = {}, {"train": {}, "val": {}, "test": {}}
    problems = []
    for k, name in enumerate(classes):
        files = sorted(p.name for p in (root / name).iterdir() if p.is_file() and is_image_file(p))
        if len(files) < MIN_PER_CLASS:
            problems.append(f"{name} ({len(files)} images)")
            continue
        for f in files:
            digest = hashlib.sha256((root / name / f).read_bytes()).hexdigest()
            other = seen.get(digest)
            if other is not None and other[0] != name:
                raise DatasetError(f"identical file in two classes: {other[0]}/{other[1]} and {name}/{f}")
            seen[digest] = (name, f)
        order = np.random.default_rng([a.seed, k]).permutation(len(files))
        shuffled = [files[i] for i in order]
        n_hold = len(files) // 10
        splits["val"][name] = shuffled[:n_hold]
        splits["test"][name] = shuffled[n_hold:2 * n_hold]
        splits["train"][name] = shuffled[2 * n_hold:]
    if problems:
        raise DatasetError(f"classes need at least {MIN_PER_CLASS} images: " + ", ".join(problems))
    index = {"root": str(root.resolve()), "classes": classes, "seed": a.seed, "splits": splits}
    path = write_json(Path(a.out) / "index.json", index)
    counts = {s: {c: len(v) for c, v in splits[s].items()} for s in splits}
    return {"index": str(path), "counts": counts}


def cmd_augment(a) -> dict:
    if a.input is None:
        raise ConfigError("augment needs --in")
    cfg = FfaConfig(p=a.p, alpha=a.alpha, m=a.m, n=a.n)
    records = augment_dataset(a.input, a.count, cfg, a.seed, a.out)
    return {"outputs": len(records), "manifest": str(Path(a.out) / "manifest.jsonl")}


def cmd_bench(a) -> dict:
    kinds = ("mhsa", "mmsa") if a.kind == "both" else (a.kind,)
    if a.kind not in ("mhsa", "mmsa", "both"):
        raise ConfigError(f"--kind must be mhsa, mmsa or both, got {a.kind!r}")
    cfg = AttentionConfig(channels=a.c, heads=a.heads, g=a.g, g_prime=a.gp)
    cfg.check_map(a.c, a.hw, a.hw)
    reports = [measure_cost(k, a.c, a.hw, a.hw, cfg, trials=a.trials, backward=a.backward, seed=a.seed)
               for k in kinds]
    records = [r.to_record() for r in reports]
    write_jsonl(Path(a.out) / "bench.jsonl", records)
    for r in records:
        emit(r)
    return {"reports": len(records)}


def _ffa_for(a) -> Optional[FfaConfig]:
    return None if a.no_ffa else FfaConfig(p=a.p, alpha=a.alpha)


def cmd_train(a) -> dict:
    ffa = _ffa_for(a)
    if a.toy:
        model = toy_config(attention_kind=a.attention)
        data = make_toy_dataset(seed=a.seed)
        held = make_toy_dataset(seed=a.seed + TOY_SEED_OFFSET)
        base = toy_train_config()
    else:
        if a.index is None:
            raise ConfigError("train needs --index (from `cmt ingest`) or --toy")
        model = CmtConfig(attention_kind=a.attention)
        hw = resolve_hw(a.hw, required_divisor(model, ffa.p if ffa else None))
        data = load_index_split(Path(a.index), "train", hw)
        held = load_index_split(Path(a.index), "val", hw)
        base = TrainConfig()
        model = CmtConfig(**{**model.__dict__, "classes": data.classes})
    if a.encoders is not None:
        model = CmtConfig(**{**model.__dict__, "encoders": a.encoders})
    overrides = {"batch": a.batch, "ffa_ratio": a.ffa_ratio}
    if a.epochs is not None:
        overrides["epochs"] = a.epochs
    if a.lr_max is not None:
        overrides["lr_max"] = a.lr_max
    cfg = TrainConfig(**{**base.__dict__, **overrides})
    params = init_params(model, a.seed)
    result = train_loop(data, params, model, cfg, ffa, seed=a.seed, out_dir=a.out,
                        on_epoch=lambda rec: emit({"event": "epoch", **rec}))
    losses = [r["mean_loss"] for r in result.log]
    held_report = report(confusion(binarize(predict(held.images, result.params, model)), held.labels,
                                   held.classes))
    summary = {
        "epochs": len(result.log),
        "final_loss": losses[-1],
        "train_of1": result.log[-1]["of1"],
        "heldout_of1": held_report.of1,
        "loss_decreasing_first_5": all(x > y for x, y in zip(losses[:5], losses[1:6])),
    }
    write_json(Path(a.out) / "summary.json", summary)
    return {"checkpoint": str(result.checkpoint), **summary}


def _eval_data(a, model: CmtConfig, run: dict) -> Dataset:
    if a.toy:
        return make_toy_dataset(seed=run.get("seed", a.seed) + TOY_SEED_OFFSET)
    if a.index is None:
        raise ConfigError("eval needs --index or --toy")
    hw = resolve_hw(a.hw, required_divisor(model))
    return load_index_split(Path(a.index), a.split, hw)


def cmd_eval(a) -> dict:
    if a.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    model, params, run = load_model(Path(a.checkpoint))
    data = _eval_data(a, model, run)
    preds = binarize(predict(data.images, params, model), a.threshold)
    counts = confusion(preds, data.labels.astype(int), data.classes)
    rep = report(counts)
    out = {"n": len(data), "threshold": a.threshold, **rep.to_record(data.class_names),
           "counts": counts.to_record()}
    if rep.warning:
        warnings.warn(f"zero-division convention applied for classes {out['zero_division_classes']}",
                      stacklevel=2)
    if a.paper_literal:
        out["printed_formulas"] = printed_formulas(preds, data.labels.astype(int))
    write_json(Path(a.out) / "report.json", out)
    return out


def cmd_cam(a) -> dict:
    if a.checkpoint is None:
        raise ConfigError("cam needs --checkpoint")
    model, params, run = load_model(Path(a.checkpoint))
    if a.toy:
        data = make_toy_dataset(seed=run.get("seed", a.seed) + TOY_SEED_OFFSET)
        if not 0 <= a.toy_index < len(data):
            raise ConfigError(f"--toy-index must lie in [0, {len(data)})")
        image, name = data.images[a.toy_index], f"toy_{a.toy_index}"
        label = int(np.argmax(data.labels[a.toy_index]))
    else:
        if a.image is None:
            raise ConfigError("cam needs --image or --toy")
        hw = resolve_hw(a.hw, required_divisor(model))
        image = resize_bilinear(to_rgb(read_image(a.image)), hw, hw)
        name, label = Path(a.image).name, None
    k = a.class_k
    if k is None:
        k = label if label is not None else int(np.argmax(predict(image[None], params, model)[0]))
    cam = grad_cam(image, params, model, k)
    path = write_overlay(Path(a.out) / f"cam_{Path(name).stem}_class{k}.png", cam, image, name)
    return {"overlay": str(path), "class": k, "min": cam.raw_min, "max": cam.raw_max}


COMMANDS = {"ingest": cmd_ingest, "augment": cmd_augment, "bench": cmd_bench,
            "train": cmd_train, "eval": cmd_eval, "cam": cmd_cam}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="default: $CMT_SEED or 0")
    common.add_argument("--config", type=Path, default=None, help="flat JSON of flag values")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: .)")

    parser = argparse.ArgumentParser(prog="cmt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("ingest", parents=[common], help="split a class-per-directory dataset 8:1:1")
    p.add_argument("--root", default=S)

    p = sub.add_parser("augment", parents=[common], help="write FFA-fused images for one class")
    p.add_argument("--in", dest="input", default=S)
    p.add_argument("--count", type=int, default=S)
    p.add_argument("--p", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--m", type=int, default=S)
    p.add_argument("--n", type=int, default=S)

    p = sub.add_parser("bench", parents=[common], help="count MACs and time MHSA/MMSA")
    p.add_argument("--kind", default=S)
    p.add_argument("--c", type=int, default=S)
    p.add_argument("--hw", type=int, default=S)
    p.add_argument("--g", type=int, default=S)
    p.add_argument("--gp", type=int, default=S)
    p.add_argument("--heads", type=int, default=S)
    p.add_argument("--trials", type=int, default=S)
    p.add_argument("--backward", action="store_true", default=S)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--toy", action="store_true", default=S, help="synthetic 4-class set at 32x32")
    p.add_argument("--index", default=S)
    p.add_argument("--hw", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr-max", dest="lr_max", type=float, default=S)
    p.add_argument("--batch", type=int, default=S)
    p.add_argument("--ffa-ratio", dest="ffa_ratio", type=float, default=S)
    p.add_argument("--no-ffa", dest="no_ffa", action="store_true", default=S)
    p.add_argument("--p", type=int, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--attention", choices=("mmsa", "mhsa"), default=S)
    p.add_argument("--encoders", type=int, default=S)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--toy", action="store_true", default=S)
    p.add_argument("--index", default=S)
    p.add_argument("--split", choices=("train", "val", "test"), default=S)
    p.add_argument("--hw", type=int, default=S)
    p.add_argument("--threshold", type=float, default=S)
    p.add_argument("--paper-literal", dest="paper_literal", action="store_true", default=S)

    p = sub.add_parser("cam", parents=[common], help="render a class activation map")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--image", default=S)
    p.add_argument("--toy", action="store_true", default=S)
    p.add_argument("--toy-index", dest="toy_index", type=int, default=S)
    p.add_argument("--class", dest="class_k", type=int, default=S)
    p.add_argument("--hw", type=int, default=S)
    return parser


def resolve_args(ns: argparse.Namespace) -> argparse.Namespace:
    """Merge defaults < config file < explicit flags."""
    defaults = DEFAULTS[ns.command]
    values = dict(defaults)
    if ns.config is not None:
        try:
            file_values = json.loads(Path(ns.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{ns.config}: expected a JSON object")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
        if "in" in file_values:
            file_values["input"] = file_values.pop("in")
        unknown = set(file_values) - set(defaults) - {"seed", "out"}
        if unknown:
            raise ConfigError(f"{ns.config}: unknown keys {sorted(unknown)}")
        values.update(file_values)
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    seed = explicit.pop("seed", None)
    out = explicit.pop("out", None)
    values.update(explicit)
    if seed is None:
        seed = values.pop("seed", None)
    values.pop("seed", None)
    if seed is None:
        env = os.environ.get("CMT_SEED")
        try:
            seed = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError(f"CMT_SEED must be an integer, got {env!r}") from None
    if out is None:
        out = values.pop("out", None)
    values.pop("out", None)
    return argparse.Namespace(command=ns.command, seed=int(seed), out=Path(out) if out else Path("."), **values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        args = resolve_args(ns)
        result = COMMANDS[args.command](args)
    except CmtError as exc:
        print(f"cmt {ns.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    emit({"event": "done", "command": args.command, **result})
    return 0
