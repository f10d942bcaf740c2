"""Command-line interface.

Subcommands: ``train``, ``eval``, ``prune``, ``report`` and ``export-prototypes``.

Options can come from an INI file (``--config``) with the sections
``[data]``, ``[model]``, ``[train]``, ``[loss]`` and ``[run]``; command-line
flags override file values. Every command echoes its resolved options as an
INI file next to its outputs, and that file parses back to the same options.

Exit codes::

    0  success
    1  unexpected package error
    2  configuration or flag error
    3  data error
    4  training divergence or numerical failure
    5  checkpoint missing, corrupted or incompatible
    6  degenerate geometry (hull or projection)

stdout carries ``key=value`` progress lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import __version__
from .data import Dataset, load_dataset, split_indices, take_subset
from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    NumericalDegeneracyError,
    PanVAEError,
    TrainingDivergenceError,
)
from .losses import LossWeights
from .metrics import coverage_ratio, project_2d, save_coordinates
from .model import ModelConfig, PrototypeBank
from .pruning import embed, prune, responsibility_counts, write_prune_report
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("panvae")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_GEOMETRY = range(7)


# -- option table -------------------------------------------------------------------


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v is None or v == "" else str(v)


@dataclass(frozen=True)
class Option:
    name: str
    section: str
    convert: Callable[[Any], Any]
    default: Any
    help: str
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


OPTIONS = {o.name: o for o in [
    # data
    Option("data", "data", _opt_str, None, "IDX directory or .npz array archive"),
    Option("split", "data", str, "train", "which split to read", ("train", "test", "holdout")),
    Option("subset", "data", int, 0, "use a seeded random subset of this many samples (0 = all)"),
    Option("subset_seed", "data", int, 0, "seed for --subset"),
    Option("holdout", "data", float, 0.0, "fraction of the train split held out as a seeded test split"),
    Option("holdout_seed", "data", int, 0, "seed for --holdout"),
    Option("eval_split", "data", _opt_str, None, "split evaluated after each epoch (default: training data)",
           ("test", "holdout")),
    # model
    Option("prototypes_per_class", "model", int, 5, "prototypes per class (M)"),
    Option("latent_dim", "model", int, 256, "latent dimension"),
    Option("epsilon", "model", float, 1e-4, "similarity epsilon"),
    Option("arch", "model", str, "conv", "encoder/decoder family", ("conv", "mlp")),
    Option("base_channels", "model", int, 16, "channels of the first conv block"),
    Option("num_blocks", "model", int, 4, "number of stride-2 conv blocks"),
    Option("hidden_dim", "model", int, 128, "hidden width of the mlp arch"),
    Option("similarity_input", "model", str, "mu", "latent code fed to the similarity head", ("mu", "sample")),
    # train
    Option("variant", "train", str, "panvae", "diversity term", ("panvae", "protovae")),
    Option("epochs", "train", int, 10, "training epochs"),
    Option("batch_size", "train", int, 128, "minibatch size"),
    Option("learning_rate", "train", float, 1e-3, "Adam learning rate"),
    Option("seed", "train", int, 0, "seed for initialisation, batch order and noise"),
    Option("eval_every", "train", int, 1, "evaluate every N epochs (0 = never)"),
    # loss
    Option("div_scale", "loss", float, 1.0, "weight of the diversity term"),
    Option("w_pred", "loss", float, 1.0, "weight of the prediction loss"),
    Option("w_vae_recon", "loss", float, 0.1, "weight of the reconstruction error"),
    Option("w_vae_kl", "loss", float, 1.0, "weight of the prototype KL term"),
    Option("jitter", "loss", float, 1e-8, "Gram matrix jitter"),
    # run
    Option("ckpt", "run", _opt_str, None, "input checkpoint"),
    Option("out", "run", _opt_str, None, "output directory (train, report, export-prototypes) or file (prune)"),
    Option("report", "run", _opt_str, None, "metrics report path (.json; a .csv twin is written alongside)"),
    Option("class_index", "run", int, 0, "class to analyse"),
    Option("n_nearest", "run", int, 100, "observations sampled per prototype"),
    Option("proj", "run", str, "pca", "2-D projection", ("pca", "external")),
    Option("proj_file", "run", _opt_str, None, "coordinates for --proj external (.npy or x,y CSV)"),
    Option("include_pruned", "run", _bool, False, "also export pruned prototypes, crossed out"),
]}

_DATA = ["data", "split", "subset", "subset_seed", "holdout", "holdout_seed"]
_MODEL = ["prototypes_per_class", "latent_dim", "epsilon", "arch", "base_channels", "num_blocks", "hidden_dim",
          "similarity_input"]
_TRAIN = ["variant", "epochs", "batch_size", "learning_rate", "seed", "eval_every"]
_LOSS = ["div_scale", "w_pred", "w_vae_recon", "w_vae_kl", "jitter"]

COMMANDS = {
    "train": _DATA + ["eval_split"] + _MODEL + _TRAIN + _LOSS + ["out"],
    "eval": ["ckpt"] + _DATA + ["jitter", "report", "variant"],
    "prune": ["ckpt"] + _DATA + ["out"],
    "report": ["ckpt"] + _DATA + ["class_index", "n_nearest", "proj", "proj_file", "out"],
    "export-prototypes": ["ckpt", "out", "include_pruned"],
}
_NO_DEFAULT_VARIANT = {"eval"}  # eval keeps the checkpoint's variant unless one is given


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panvae", description="Prototype VAE classifiers with diversity losses.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="INI file with option defaults")
        p.add_argument("-v", "--verbose", action="count", default=0)
        for name in names:
            o = OPTIONS[name]
            flags = [o.flag] + (["--class"] if name == "class_index" else [])
            if o.convert is _bool:
                p.add_argument(*flags, dest=name, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(*flags, dest=name, default=None, help=o.help, metavar=name.upper())
    return parser


def resolve_options(command: str, args: argparse.Namespace | None = None, config_path=None) -> dict[str, Any]:
    """Defaults, then the INI file, then explicit flags; every value converted and range-checked."""
    names = COMMANDS[command]
    values: dict[str, Any] = {n: OPTIONS[n].default for n in names}
    if command in _NO_DEFAULT_VARIANT and "variant" in values:
        values["variant"] = None
    if config_path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            read = cp.read(config_path)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config {config_path}: {exc}") from exc
        if not read:
            raise ConfigurationError(f"config file {config_path} not found")
        known = {(OPTIONS[n].section, n) for n in OPTIONS}
        for section in cp.sections():
            for key, raw in cp.items(section):
                if (section, key) not in known:
                    raise ConfigurationError(f"{config_path}: unknown option [{section}] {key}")
                if key in values:
                    values[key] = raw
    if args is not None:
        for n in names:
            v = getattr(args, n, None)
            if v is not None:
                values[n] = v
    for n, v in values.items():
        o = OPTIONS[n]
        if v == "" and (o.default is None or (n == "variant" and command in _NO_DEFAULT_VARIANT)):
            v = values[n] = None
        if v is None:
            continue
        try:
            v = o.convert(v)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{o.flag}: cannot parse {v!r}") from exc
        if o.choices is not None and v is not None and v not in o.choices:
            raise ConfigurationError(f"{o.flag}: {v!r} is not one of {', '.join(o.choices)}")
        values[n] = v
    _check_ranges(values)
    return values


def _check_ranges(v: dict[str, Any]):
    for name in ("subset", "n_nearest", "class_index"):
        if name in v and v[name] < 0:
            raise ConfigurationError(f"{OPTIONS[name].flag} must be nonnegative")
    if "n_nearest" in v and v["n_nearest"] < 1:
        raise ConfigurationError("--n-nearest must be positive")
    if "holdout" in v and not 0.0 <= v["holdout"] < 1.0:
        raise ConfigurationError("--holdout must lie in [0, 1)")
    if "split" in v and v["split"] == "holdout" and not v.get("holdout"):
        raise ConfigurationError("--split holdout needs --holdout > 0")
    if v.get("eval_split") == "holdout" and not v.get("holdout"):
        raise ConfigurationError("--eval-split holdout needs --holdout > 0")
    if v.get("proj") == "external" and not v.get("proj_file"):
        raise ConfigurationError("--proj external requires --proj-file")


def echo_config(values: dict[str, Any], path) -> Path:
    """Write ``values`` as INI; ``resolve_options`` on the file returns the same values."""
    cp = configparser.ConfigParser(interpolation=None)
    for name, v in values.items():
        section = OPTIONS[name].section
        if not cp.has_section(section):
            cp.add_section(section)
        if v is None:
            text = ""
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        cp.set(section, name, text)
    path = Path(path)
    with open(path, "w") as f:
        cp.write(f)
    return path


# -- helpers --------------------------------------------------------------------------


def emit(**fields):
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), flush=True)


def _fmt(v) -> str:
    if v is None:
        return "na"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _require(values, name: str, exc=ConfigurationError):
    if values.get(name) is None:
        raise exc(f"missing required flag {OPTIONS[name].flag}")
    return values[name]


def load_split(values: dict[str, Any], split: str | None = None) -> Dataset:
    """Dataset for ``split`` after the optional holdout partition and subset."""
    path = _require(values, "data", DataError)
    split = split or values["split"]
    ds = load_dataset(path, "test" if split == "test" else "train")
    if values["holdout"] > 0 and split != "test":
        fit, held = split_indices(len(ds), values["holdout"], values["holdout_seed"])
        ds = ds.subset(held, "test") if split == "holdout" else ds.subset(fit, "train")
    if values["subset"]:
        ds = take_subset(ds, values["subset"], values["subset_seed"])
    return ds


def _load_ckpt(values, variant=None):
    path = Path(_require(values, "ckpt"))
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    loaded = load_checkpoint(path, variant)
    for note in loaded.notes:
        print(f"note: {note}", file=sys.stderr)
    return loaded


def _check_data_shape(model, ds: Dataset):
    if tuple(ds.input_shape) != tuple(model.config.input_shape):
        raise DataError(f"data shape {ds.input_shape} does not match checkpoint input shape "
                        f"{tuple(model.config.input_shape)}")
    if ds.labels.max() >= model.config.num_classes:
        raise DataError(f"label {ds.labels.max()} out of range for {model.config.num_classes} classes")


# -- commands ------------------------------------------------------------------------


def cmd_train(values: dict[str, Any]) -> int:
    out = Path(_require(values, "out"))
    weights = LossWeights(values["w_pred"], values["w_vae_recon"], values["w_vae_kl"], values["div_scale"],
                          values["jitter"])
    tcfg = TrainConfig(values["variant"], values["epochs"], values["batch_size"], values["learning_rate"],
                       weights, values["seed"], str(out), values["eval_every"])
    model_kw = {n: values[n] for n in _MODEL}
    ModelConfig(num_classes=2, input_shape=(1, 28, 28), seed=values["seed"], **model_kw)  # validate early
    data = load_split(values)
    eval_data = load_split(values, values["eval_split"]) if values["eval_split"] else None
    mcfg = ModelConfig(num_classes=data.num_classes, input_shape=data.input_shape, seed=values["seed"], **model_kw)

    out.mkdir(parents=True, exist_ok=True)
    echo_config(values, out / "config.ini")
    emit(event="start", variant=tcfg.variant, n_train=len(data), epochs=tcfg.epochs, w_div=weights.w_div)

    def progress(rec):
        emit(epoch=rec.epoch, total=rec.losses["total"], pred=rec.losses["pred"],
             diversity=rec.losses["diversity"], accuracy=rec.accuracy, db=rec.db,
             seconds=round(rec.wall_clock, 2))

    train(tcfg, data, mcfg, eval_data=eval_data, on_epoch=progress)
    emit(event="done", checkpoint=out / "model.ckpt", record=out / "run_record.csv")
    return EXIT_OK


def cmd_eval(values: dict[str, Any]) -> int:
    report_path = Path(_require(values, "report"))
    loaded = _load_ckpt(values, values["variant"])
    data = load_split(values)
    _check_data_shape(loaded.model, data)
    acc, report = evaluate(loaded.model, data, values["jitter"])
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(report_path)
    report.write_csv(report_path.with_suffix(".csv"))
    echo_config(values, report_path.with_suffix(".config.ini"))
    emit(accuracy=acc, db=report.db, entropy=report.entropy, report=report_path)
    return EXIT_OK


def cmd_prune(values: dict[str, Any]) -> int:
    out = Path(_require(values, "out"))
    ckpt = Path(_require(values, "ckpt"))
    if out.resolve() == ckpt.resolve():
        raise ConfigurationError("--out must differ from --ckpt; refusing to overwrite the input checkpoint")
    loaded = _load_ckpt(values)
    data = load_split(values)
    _check_data_shape(loaded.model, data)
    model = loaded.model
    counts = responsibility_counts(model, data)
    before = PrototypeBank(model.prototypes.detach(), model.active_mask.clone())
    after = prune(counts, before)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.active_mask.copy_(after.active_mask)
    save_checkpoint(model, out, loaded.variant)
    report = out.with_name(out.stem + "_prune_report.csv")
    write_prune_report(report, counts, before, after)
    echo_config(values, out.with_name(out.stem + ".config.ini"))
    n_pruned = int((before.active_mask & ~after.active_mask).sum())
    emit(pruned=n_pruned, active=int(after.active_mask.sum()), checkpoint=out, report=report)
    return EXIT_OK


def cmd_report(values: dict[str, Any]) -> int:
    out = Path(_require(values, "out"))
    loaded = _load_ckpt(values)
    model = loaded.model
    k = values["class_index"]
    if k >= model.config.num_classes:
        raise ConfigurationError(f"--class {k} out of range for {model.config.num_classes} classes")
    data = load_split(values)
    _check_data_shape(model, data)
    cls = data.of_class(k)
    z = embed(model, cls.images)
    protos = model.bank.active(k).detach().double().numpy()
    coords = project_2d(z, values["proj"], values["proj_file"])
    res = coverage_ratio(z, protos, values["n_nearest"], model.config.epsilon, coords=coords)

    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "class": k,
        "coverage_ratio": res.ratio,
        "n_nearest": values["n_nearest"],
        "n_class": len(z),
        "n_selected": int(len(res.selected)),
        "n_prototypes": int(len(protos)),
        "class_hull_area": res.class_hull.area,
        "sample_hull_area": res.sample_hull.area,
        "projection": values["proj"],
    }
    with open(out / "coverage.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    save_coordinates(out / "class_hull.csv", res.class_hull.vertices)
    save_coordinates(out / "sample_hull.csv", res.sample_hull.vertices)
    selected = np.zeros(len(z), dtype=bool)
    selected[res.selected] = True
    with open(out / "coordinates.csv", "w") as f:
        f.write("x,y,selected\n")
        for (x, y), s in zip(res.coords, selected):
            f.write(f"{float(x)!r},{float(y)!r},{int(s)}\n")
    echo_config(values, out / "config.ini")
    emit(**{"class": k}, coverage=res.ratio, selected=len(res.selected), out=out)
    return EXIT_OK


def _to_pil(img: np.ndarray):
    from PIL import Image

    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if px.shape[0] == 1:
        return Image.fromarray(px[0], mode="L")
    if px.shape[0] == 3:
        return Image.fromarray(np.moveaxis(px, 0, -1), mode="RGB")
    raise ConfigurationError(f"cannot render {px.shape[0]}-channel images")


def _cross_out(im):
    """Red diagonal cross over an image (marks a pruned prototype)."""
    from PIL import ImageDraw

    im = im.convert("RGB")
    w, h = im.size
    draw = ImageDraw.Draw(im)
    width = max(1, min(w, h) // 14)
    draw.line([(0, 0), (w - 1, h - 1)], fill=(255, 0, 0), width=width)
    draw.line([(0, h - 1), (w - 1, 0)], fill=(255, 0, 0), width=width)
    return im


def _montage(tiles, pad: int = 2):
    from PIL import Image

    mode = "RGB" if any(t.mode == "RGB" for t in tiles) else "L"
    w, h = tiles[0].size
    sheet = Image.new(mode, (len(tiles) * (w + pad) + pad, h + 2 * pad), color=255 if mode == "L" else (255,) * 3)
    for i, t in enumerate(tiles):
        sheet.paste(t.convert(mode), (pad + i * (w + pad), pad))
    return sheet


def cmd_export(values: dict[str, Any]) -> int:
    out = Path(_require(values, "out"))
    loaded = _load_ckpt(values)
    model = loaded.model
    model.eval()
    with torch.no_grad():
        imgs = model.decode_prototypes().double().numpy()
    mask = model.active_mask.numpy()
    out.mkdir(parents=True, exist_ok=True)
    written = marked = 0
    for k in range(imgs.shape[0]):
        tiles = []
        for j in range(imgs.shape[1]):
            if mask[k, j]:
                im = _to_pil(imgs[k, j])
                im.save(out / f"class_{k}_proto_{j}.png")
                written += 1
            elif values["include_pruned"]:
                im = _cross_out(_to_pil(imgs[k, j]))
                im.save(out / f"class_{k}_proto_{j}_pruned.png")
                marked += 1
            else:
                continue
            tiles.append(im)
        _montage(tiles).save(out / f"class_{k}_montage.png")
    echo_config(values, out / "config.ini")
    emit(active=written, pruned_marked=marked, out=out)
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "report": cmd_report,
    "export-prototypes": cmd_export,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (TrainingDivergenceError, NumericalDegeneracyError)):
        return EXIT_DIVERGED
    if isinstance(exc, DegenerateGeometryError):
        return EXIT_GEOMETRY
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve_options(args.command, args, args.config)
        return HANDLERS[args.command](values)
    except PanVAEError as exc:
        print(f"panvae {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"panvae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
