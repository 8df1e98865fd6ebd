"""Command line entry point: ``viewfuse <subcommand> [options]``.

Every subcommand reads one optional JSON experiment file with the sections
``synth``, ``net2d``, ``lift``, ``backbone``, ``train``, ``eval`` and
``inputs``. Values resolve as flag > file > default. The fully resolved
document is written to ``<out>/config.json``, so ``--config <out>/config.json
--out <new>`` repeats a run.

Exit codes: 0 ok, 1 other input error, 2 config error, 3 missing upstream
artifact, 4 numeric failure (NaN, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DependencyError, NumericError, ViewfuseError
from .lift import AggregatorConfig
from .net2d import Unet2d, Unet2dConfig, pretrain2d
from .nn import SgdConfig, load_checkpoint, save_checkpoint
from .pipeline import TrainConfig
from .pointnet2 import BackboneConfig, Fusion
from .scene import IGNORE_LABEL
from .synth import SynthConfig

NET2D_EXTRA = {"epochs": 10, "batch_size": 16, "lr": 0.05, "flip": True, "seed": 0}
BACKBONE_EXTRA = {"fusion": "early"}
EVAL_DEFAULTS = {"split": "val", "stride": 0.5, "seed": 0,
                 "keep_ratios": [1.0, 0.5, 0.25, 0.125, 0.0625]}
INPUT_DEFAULTS = {"corpus": None, "net2d": None, "model": None}

SECTIONS = {
    "synth": (SynthConfig, {}),
    "net2d": (Unet2dConfig, NET2D_EXTRA),
    "lift": (AggregatorConfig, {}),
    "backbone": (BackboneConfig, BACKBONE_EXTRA),
    "train": (TrainConfig, {}),
    "eval": (None, EVAL_DEFAULTS),
    "inputs": (None, INPUT_DEFAULTS),
}


def _section_defaults(name) -> dict:
    cls, extra = SECTIONS[name]
    out = {}
    if cls is not None:
        for f in dataclasses.fields(cls):
            out[f.name] = _jsonable(getattr(cls(), f.name))
    out.update(extra)
    return out


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {k: _jsonable(x) for k, x in dataclasses.asdict(v).items()}
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    return v


def _check_value(path, default, value):
    """Type-check ``value`` against the shape of ``default``."""
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        out = dict(default)
        for k, v in value.items():
            if k not in default:
                raise ConfigError(f"{path}.{k}", "unknown key")
            out[k] = _check_value(f"{path}.{k}", default[k], v)
        return out
    if default is None:
        paths = value if isinstance(value, list) else [value]
        if value is not None and not all(isinstance(v, str) for v in paths):
            raise ConfigError(path, "expected a path string, a list of paths or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if not default:
            return value
        # positional prototypes, so records like (epoch, multiplier) keep their types
        return [_check_value(f"{path}[{i}]", default[min(i, len(default) - 1)], v)
                for i, v in enumerate(value)]
    raise ConfigError(path, "unsupported field")


def resolve_config(doc: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then the file document, then ``{"section.key": value}`` flags."""
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    for name in doc:
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
    cfg = {name: _check_value(name, _section_defaults(name), doc.get(name, {})) for name in SECTIONS}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, field = key.split(".")
        cfg[section] = _check_value(section, cfg[section], {field: value})
    build_all(cfg)
    return cfg


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _build(path, cls, values: dict, drop=()):
    kwargs = {k: _tuplify(v) for k, v in values.items() if k not in drop}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path, str(exc)) from None


def build_all(cfg: dict) -> dict:
    """Dataclass objects for every section; raises ConfigError on invalid values."""
    train = dict(cfg["train"])
    sgd = _build("train.sgd", SgdConfig, train.pop("sgd"))
    out = {
        "synth": _build("synth", SynthConfig, cfg["synth"]),
        "net2d": _build("net2d", Unet2dConfig, cfg["net2d"], drop=NET2D_EXTRA),
        "lift": _build("lift", AggregatorConfig, cfg["lift"]),
        "backbone": _build("backbone", BackboneConfig, cfg["backbone"], drop=BACKBONE_EXTRA),
        "train": _build("train", TrainConfig, {**train, "sgd": sgd}),
    }
    try:
        out["fusion"] = Fusion(cfg["backbone"]["fusion"])
    except ValueError:
        raise ConfigError("backbone.fusion", f"must be one of {[f.value for f in Fusion]}") from None
    for r in cfg["eval"]["keep_ratios"]:
        if r < 0:
            raise ConfigError("eval.keep_ratios", "ratios must be >= 0")
    if cfg["eval"]["stride"] <= 0:
        raise ConfigError("eval.stride", "must be positive")
    return out


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{p}: invalid JSON ({exc})") from None


def write_snapshot(out: Path, cfg: dict, seed: int):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    (out / "seed.txt").write_text(f"{seed}\n")


# ---------------------------------------------------------------- artifacts

def _need(path, what, hint):
    if path is None:
        raise DependencyError(f"no {what} given ({hint})")
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"{what} {p} not found ({hint})")
    return p


def _corpus(cfg):
    from .synth import read_corpus
    return read_corpus(_need(cfg["inputs"]["corpus"], "corpus", "run `viewfuse synth` first"))


def _class_names(cfg):
    root = Path(_need(cfg["inputs"]["corpus"], "corpus", "run `viewfuse synth` first"))
    if not (root / "corpus.json").exists():
        raise DependencyError(f"{root}: corpus.json missing (run `viewfuse synth` first)")
    return json.loads((root / "corpus.json").read_text())["class_names"]


def _ckpt_path(path, name):
    if path is None:
        return None
    p = Path(path)
    return p / name if p.is_dir() else p


def load_net2d(path, config: Unet2dConfig) -> Unet2d:
    state, _ = load_checkpoint(_need(_ckpt_path(path, "net2d.ckpt"), "2D checkpoint",
                                     "run `viewfuse pretrain2d` first"))
    net = Unet2d(config)
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigError("net2d", f"checkpoint does not match the configured network: {exc}") from None
    return net.eval()


def load_model(path):
    """Rebuild a trained model from its checkpoint; returns ``(model, config)``."""
    from .pipeline import SegmentationModel

    ckpt = _need(_ckpt_path(path, "model.ckpt"), "model checkpoint", "run `viewfuse train` first")
    state, header = load_checkpoint(ckpt)
    cfg = header["meta"]["config"]
    objs = build_all(cfg)
    net = Unet2d(objs["net2d"]) if objs["fusion"].needs_lifted else None
    model = SegmentationModel(objs["fusion"], objs["backbone"], objs["lift"], net)
    model.load_state_dict(state)
    return model.eval(), cfg


def _split(corpus, name):
    if name not in corpus:
        raise ConfigError("eval.split", f"corpus has no split {name!r}")
    return corpus[name]


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, objs, out, args):
    from .synth import write_corpus
    write_corpus(objs["synth"], out)
    write_snapshot(out, cfg, objs["synth"].seed)
    print(f"corpus written to {out}")


def cmd_pretrain2d(cfg, objs, out, args):
    corpus = _corpus(cfg)
    scenes = corpus["train"]
    images = np.stack([f.rgb for s in scenes for f in s.frames])
    labels = [lab for s in scenes for lab in s.labels2d]
    if not labels or any(lab is None for lab in labels):
        raise DependencyError("corpus carries no per-pixel labels")
    n2 = cfg["net2d"]
    net, losses = pretrain2d(images, np.stack(labels), objs["net2d"],
                             SgdConfig(lr=n2["lr"], schedule=()), epochs=n2["epochs"],
                             batch_size=n2["batch_size"], seed=n2["seed"], flip=n2["flip"],
                             log=lambda e, s, l: print(f"epoch {e + 1} step {s} loss {l:.4f}")
                             if s % 50 == 0 else None)
    if not np.all(np.isfinite(losses)):
        raise NumericError("non-finite loss in 2D pretraining")
    write_snapshot(out, cfg, n2["seed"])
    save_checkpoint(out / "net2d.ckpt", net.state_dict(), epoch=n2["epochs"], seed=n2["seed"],
                    meta={"config": cfg})
    with (out / "pretrain.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        w.writerows([i, repr(float(v))] for i, v in enumerate(losses))
    if "val" in corpus:
        val = corpus["val"]
        vimg = np.stack([f.rgb for s in val for f in s.frames])
        vlab = np.stack([lab for s in val for lab in s.labels2d])
        ok = vlab != IGNORE_LABEL
        acc = float(np.mean(net.predict(vimg)[ok] == vlab[ok]))
        print(f"val pixel accuracy {acc:.4f}")


def cmd_train(cfg, objs, out, args):
    from .eval import write_metrics_csv
    from .pipeline import train

    corpus = _corpus(cfg)
    fusion, tcfg = objs["fusion"], objs["train"]
    net = None
    if fusion.needs_lifted:
        if cfg["inputs"]["net2d"] is None and not tcfg.freeze_2d:
            net = Unet2d(objs["net2d"], np.random.default_rng([tcfg.seed, 3]))
        else:
            net = load_net2d(cfg["inputs"]["net2d"], objs["net2d"])
    names = _class_names(cfg)
    write_snapshot(out, cfg, tcfg.seed)
    model, rows = train(corpus["train"], corpus.get("val", []), fusion, tcfg, net,
                        objs["backbone"], objs["lift"], len(names), names, log=print)
    save_checkpoint(out / "model.ckpt", model.state_dict(), epoch=tcfg.epochs, seed=tcfg.seed,
                    meta={"config": cfg})
    write_metrics_csv(out / "metrics.csv", rows, names)


def _eval_kwargs(mcfg, cfg, workers):
    t = mcfg["train"]
    return dict(views_m=t["views_m"], n_rgb=t["n_rgb"], stride=cfg["eval"]["stride"],
                size=t["chunk_size"], n_chunk=t["n_chunk"], workers=workers)


def cmd_infer(cfg, objs, out, args):
    from .pipeline import infer_scene

    model, mcfg = load_model(_need(cfg["inputs"]["model"], "model", "run `viewfuse train` first"))
    scenes = _split(_corpus(cfg), cfg["eval"]["split"])
    write_snapshot(out, cfg, cfg["eval"]["seed"])
    kw = _eval_kwargs(mcfg, cfg, 1)
    kw.pop("workers")
    pred_dir = out / "predictions"
    pred_dir.mkdir(exist_ok=True)
    for scene in scenes:
        res = infer_scene(scene, model, seed=cfg["eval"]["seed"], **kw)
        res.labels.astype("<u2").tofile(pred_dir / f"{scene.name}.labels.bin")
        print(f"{scene.name}: {len(res.chunks)} windows, {scene.points.n} points")


def cmd_eval(cfg, objs, out, args):
    from .eval import evaluate_scenes, write_metrics_csv

    model, mcfg = load_model(_need(cfg["inputs"]["model"], "model", "run `viewfuse train` first"))
    names = _class_names(cfg)
    split = cfg["eval"]["split"]
    scenes = _split(_corpus(cfg), split)
    write_snapshot(out, cfg, cfg["eval"]["seed"])
    res = evaluate_scenes(model, scenes, len(names), seed=cfg["eval"]["seed"],
                          **_eval_kwargs(mcfg, cfg, args.workers))
    write_metrics_csv(out / "metrics.csv", [{"epoch": mcfg["train"]["epochs"], "split": split,
                                              "miou": res.miou, "ious": list(res.ious)}], names)
    np.savetxt(out / "confusion.csv", res.cm.counts, fmt="%d", delimiter=",")
    print(f"{split} mIoU {res.miou:.4f} accuracy {res.accuracy:.4f}")


def cmd_robustness(cfg, objs, out, args):
    from .eval import density_robustness, robustness_svg, write_metrics_csv

    paths = cfg["inputs"]["model"]
    paths = paths if isinstance(paths, list) else [paths]
    names = _class_names(cfg)
    scenes = _split(_corpus(cfg), cfg["eval"]["split"])
    write_snapshot(out, cfg, cfg["eval"]["seed"])
    series = {}
    for path in paths:
        model, mcfg = load_model(_need(path, "model", "run `viewfuse train` first"))
        label = model.fusion.value
        rows = density_robustness(model, scenes, len(names), cfg["eval"]["keep_ratios"],
                                  seed=cfg["eval"]["seed"], **_eval_kwargs(mcfg, cfg, args.workers))
        for r in rows:
            r["split"] = cfg["eval"]["split"]
        write_metrics_csv(out / f"robustness_{label}.csv", rows, names, key="ratio")
        series[label] = [(r["ratio"], r["miou"]) for r in rows]
        for r in rows:
            m = "n/a" if r["miou"] is None else f"{r['miou']:.4f}"
            print(f"{label} ratio {r['ratio']:g}: mIoU {m}")
    robustness_svg(series, out / "robustness.svg")


def cmd_views(cfg, objs, out, args):
    from .pipeline import chunk_view_report

    scenes = _split(_corpus(cfg), cfg["eval"]["split"])
    t = cfg["train"]
    m = args.m if args.m is not None else t["views_m"]
    write_snapshot(out, cfg, cfg["eval"]["seed"])
    report = {}
    for scene in scenes:
        report[scene.name] = chunk_view_report(scene, m, cfg["eval"]["stride"], t["chunk_size"],
                                               t["n_chunk"], t["n_rgb"], cfg["eval"]["seed"])
        cov = np.mean([w["coverage"] for w in report[scene.name]])
        print(f"{scene.name}: {len(report[scene.name])} windows, mean coverage {cov:.4f}")
    (out / "views.json").write_text(json.dumps(report, indent=1) + "\n")


def cmd_gradcheck(cfg, objs, out, args):
    from .gradsuite import format_table, run_suite

    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed)
    write_snapshot(out, cfg, seed)
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "entries", "max_rel_error", "passed"])
        for r in results:
            w.writerow([r.name, r.num_checked, repr(r.max_rel_error), r.passed(1e-4)])
    print(format_table(results))
    failed = [r.name for r in results if not r.passed(1e-4)]
    if failed:
        raise NumericError(f"gradient check failed: {', '.join(failed)}")
    print(f"all {len(results)} checks passed")


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic corpus"),
    "pretrain2d": (cmd_pretrain2d, "train the 2D encoder-decoder on per-pixel labels"),
    "train": (cmd_train, "train a fusion model"),
    "infer": (cmd_infer, "label every point of a split with sliding-window voting"),
    "eval": (cmd_eval, "mIoU of a trained model on a split"),
    "robustness": (cmd_robustness, "mIoU under uniform point thinning"),
    "views": (cmd_views, "selected frame ids and coverage per inference window"),
    "gradcheck": (cmd_gradcheck, "run the finite-difference gradient suite"),
}

SEED_KEY = {"synth": "synth.seed", "pretrain2d": "net2d.seed", "train": "train.seed"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viewfuse", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="experiment JSON (every field optional)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, help="overrides the seed of this stage")
        s.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="processes for per-scene inference (default: all cores)")
        if name != "synth" and name != "gradcheck":
            s.add_argument("--corpus", help="corpus directory (inputs.corpus)")
        if name in ("pretrain2d", "train"):
            s.add_argument("--epochs", type=int)
        if name == "train":
            s.add_argument("--net2d", help="pretrained 2D checkpoint or run dir (inputs.net2d)")
            s.add_argument("--fusion", choices=[f.value for f in Fusion])
        if name in ("infer", "eval"):
            s.add_argument("--model", help="trained model checkpoint or run dir (inputs.model)")
        if name == "robustness":
            s.add_argument("--model", action="append",
                           help="trained model checkpoint or run dir; repeat to compare")
        if name in ("infer", "eval", "robustness", "views"):
            s.add_argument("--split", help="corpus split (eval.split)")
        if name == "views":
            s.add_argument("--m", type=int, help="views per window (default train.views_m)")
    return p


def _overrides(args) -> dict:
    ov = {}
    if args.seed is not None:
        ov[SEED_KEY.get(args.command, "eval.seed")] = args.seed
    for flag, key in (("corpus", "inputs.corpus"), ("net2d", "inputs.net2d"),
                      ("fusion", "backbone.fusion"), ("split", "eval.split")):
        ov[key] = getattr(args, flag, None)
    if getattr(args, "epochs", None) is not None:
        ov["net2d.epochs" if args.command == "pretrain2d" else "train.epochs"] = args.epochs
    if args.command in ("infer", "eval", "robustness"):
        ov["inputs.model"] = args.model
    return ov


EXIT_CODES = ((ConfigError, 2, "config"), (DependencyError, 3, "dependency"),
              (NumericError, 4, "numeric"), (ViewfuseError, 1, "input"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(load_config_file(args.config), _overrides(args))
        objs = build_all(cfg)
        COMMANDS[args.command][0](cfg, objs, Path(args.out), args)
    except ViewfuseError as exc:
        for cls, code, tag in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error[{tag}]: {exc}", file=sys.stderr)
                return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
