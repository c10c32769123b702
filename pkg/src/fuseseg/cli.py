"""Command-line entry points: synth, train, infer, evaluate.

Commands compose through file-system artifacts only: ``synth`` writes a
dataset directory, ``train`` consumes it and writes checkpoints plus a
per-epoch metrics file, ``infer`` and ``evaluate`` consume checkpoints and
datasets. Every output directory carries exactly one ``manifest.txt`` with
the config snapshot, seed, artifact hashes and timings.

Config files are INI-style ``key = value`` sections; command-line flags
override file values. Exit codes: 0 success, 2 config error, 3 data error,
4 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import evaluation as eval_mod
from .checkpoint import load_model, save_model
from .training import (
    ABLATABLE_TERMS,
    LossWeights,
    TrainConfig,
    Trainer,
    pair_weight_report,
    prepare_dataset,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4

ANNOTATION_CHOICES = (0.0, 0.125, 0.25, 0.5, 1.0)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(_hash_file(path).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _read_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG)
    flat = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            flat[key] = value
    return flat


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _phantom_config(flat: dict, args) -> data_mod.PhantomConfig:
    cfg = data_mod.PhantomConfig()
    mapping = {
        "image_size": int, "n_subjects": int, "slices_per_subject": int,
        "misalignment_amplitude": float, "noise_sigma": float, "seed": int,
    }
    for key, cast in mapping.items():
        if key in flat:
            setattr(cfg, key, cast(flat[key]))
    for key in mapping:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


def cmd_synth(args) -> int:
    flat = _read_config_file(args.config) if args.config else {}
    cfg = _phantom_config(flat, args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory not empty: {out}", EXIT_DATA)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG)
    t0 = time.time()
    ds = data_mod.generate_phantom_dataset(cfg)
    data_mod.save_dataset(ds, out)
    report = eval_mod.copy_baseline(ds)
    (out / "copy_baseline.txt").write_text("\n".join(report.lines()) + "\n")
    entries = {f"config.{k}": v for k, v in asdict(cfg).items() if k != "intensity_profiles"}
    entries.update({
        "command": "synth",
        "seed": cfg.seed,
        "copy_dice": repr(float(report.mean)),
        "dataset_hash": hash_tree_excluding(out, {"manifest.txt"}),
        "elapsed_s": f"{time.time() - t0:.3f}",
    })
    write_manifest(out, entries)
    print(f"dataset written to {out} (copy baseline {report.mean:.4f})")
    return EXIT_OK


def hash_tree_excluding(root, exclude) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name in exclude:
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(_hash_file(path).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_INT = {"fold", "target_modality", "shuffle_offset", "candidates",
              "anatomy_channels", "z_dim", "anatomy_levels", "anatomy_width",
              "decoder_width", "segmentor_width", "epochs", "batch_size",
              "seed", "swa_start", "swa_cycle"}
_TRAIN_FLOAT = {"annotations", "learning_rate", "sup_dice_weight", "sup_ce_weight"}
_TRAIN_STR = {"pairing", "decoder"}
_TRAIN_BOOL = {"use_stn", "check_invariants"}
_WEIGHT_KEYS = {"w_kl": "kl", "w_sup": "sup", "w_adv_mask": "adv_mask",
                "w_rec": "rec", "w_adv_image": "adv_image", "w_z_rec": "z_rec"}


def _train_config(flat: dict, args) -> TrainConfig:
    cfg = TrainConfig()
    weights = LossWeights()
    try:
        for key, value in flat.items():
            if key in _TRAIN_INT:
                setattr(cfg, key, int(value))
            elif key in _TRAIN_FLOAT:
                setattr(cfg, key, float(value))
            elif key in _TRAIN_STR:
                setattr(cfg, key, value.strip())
            elif key in _TRAIN_BOOL:
                setattr(cfg, key, value.strip().lower() in ("1", "true", "yes"))
            elif key in _WEIGHT_KEYS:
                setattr(weights, _WEIGHT_KEYS[key], float(value))
            elif key == "ablate":
                cfg.ablate = tuple(t.strip() for t in value.split(",") if t.strip())
            elif key in ("dataset", "out", "threads"):
                pass
            else:
                raise CliError(f"unknown config key: {key}", EXIT_CONFIG)
    except ValueError as exc:
        raise CliError(f"bad config value: {exc}", EXIT_CONFIG)
    cfg.weights = weights

    for name in (_TRAIN_INT | _TRAIN_FLOAT | _TRAIN_STR):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "no_stn", False):
        cfg.use_stn = False
    if getattr(args, "ablate", None):
        cfg.ablate = tuple(args.ablate)

    if cfg.pairing not in ("expert", "automated", "random"):
        raise CliError(f"unknown pairing mode: {cfg.pairing}", EXIT_CONFIG)
    if cfg.decoder not in ("film", "spade"):
        raise CliError(f"unknown decoder kind: {cfg.decoder}", EXIT_CONFIG)
    if not 0.0 <= cfg.annotations <= 1.0:
        raise CliError("annotations fraction must lie in [0, 1]", EXIT_CONFIG)
    for term in cfg.ablate:
        if term not in ABLATABLE_TERMS:
            raise CliError(f"unsupported ablation: {term!r}", EXIT_CONFIG)
    if cfg.fold not in (0, 1, 2):
        raise CliError("fold must be 0, 1 or 2", EXIT_CONFIG)
    return cfg


def _train_manifest_entries(cfg: TrainConfig) -> dict:
    entries = {}
    for key, value in asdict(cfg).items():
        if key == "weights":
            for wk, wv in value.items():
                entries[f"config.weight.{wk}"] = repr(wv)
        elif key == "ablate":
            entries["config.ablate"] = ",".join(cfg.ablate) or "-"
        else:
            entries[f"config.{key}"] = value
    disabled = [t for t in cfg.ablate]
    if not cfg.use_stn:
        disabled.append("stn")
    entries["disabled_terms"] = ",".join(disabled) or "-"
    return entries


def cmd_train(args) -> int:
    flat = _read_config_file(args.config) if args.config else {}
    cfg = _train_config(flat, args)
    dataset_dir = args.dataset or flat.get("dataset")
    if not dataset_dir:
        raise CliError("no dataset directory given", EXIT_CONFIG)
    out = Path(args.out or flat.get("out") or "run")
    out.mkdir(parents=True, exist_ok=True)
    threads = args.threads or int(flat.get("threads", 0))
    if threads:
        torch.set_num_threads(threads)

    try:
        ds = data_mod.load_dataset(dataset_dir)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_DATA)

    t0 = time.time()
    train_ds, val_ds, test_ds = prepare_dataset(ds, cfg)
    torch.manual_seed(cfg.seed)
    model_cfg = cfg.model_config(ds.n_modalities, ds.n_classes)
    from .model import SegmentationModel

    model = SegmentationModel(model_cfg)
    trainer = Trainer(model, train_ds, val_ds, cfg)
    log = (lambda line: print(line, flush=True)) if args.verbose else None
    result = trainer.fit(out_dir=out, log=log)

    save_model(out / "checkpoint_final.ckpt", result.model,
               {"swa": "0", "seed": str(cfg.seed)})
    if result.swa_model is not None:
        save_model(out / "checkpoint_swa.ckpt", result.swa_model,
                   {"swa": "1", "snapshots": str(result.swa_state.snapshot_count),
                    "seed": str(cfg.seed)})

    entries = _train_manifest_entries(cfg)
    entries.update({
        "command": "train",
        "seed": cfg.seed,
        "dataset": str(dataset_dir),
        "dataset_hash": hash_tree(dataset_dir),
        "checkpoint_final_hash": _hash_file(out / "checkpoint_final.ckpt"),
        "torch_threads": torch.get_num_threads(),
        "elapsed_s": f"{time.time() - t0:.3f}",
    })
    if result.swa_model is not None:
        entries["checkpoint_swa_hash"] = _hash_file(out / "checkpoint_swa.ckpt")
    write_manifest(out, entries)
    print(f"training finished: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _load_checkpoint(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {exc}", EXIT_CHECKPOINT)
    except (ValueError, KeyError, RuntimeError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_CHECKPOINT)


def cmd_infer(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    if args.decoder and meta.get("decoder") != args.decoder:
        raise CliError(
            f"checkpoint decoder {meta.get('decoder')!r} does not match "
            f"requested {args.decoder!r}", EXIT_CHECKPOINT,
        )
    try:
        ds = data_mod.load_dataset(args.dataset)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_DATA)
    target = args.target_modality
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    times = []
    n_written = 0
    for sub in ds.subjects():
        vol = ds.volume(sub, target)
        labels = []
        for s in vol:
            x = torch.from_numpy(s.pixels).float().unsqueeze(0)
            t0 = time.time()
            if args.mode == "single":
                pred = model.infer_single(x, target)
            else:
                sources = [
                    (torch.from_numpy(src.pixels).float().unsqueeze(0), src.modality_id)
                    for src in eval_mod._gather_sources(ds, sub, target, s.slice_index)
                ]
                if not sources:
                    raise CliError("multi mode needs source images", EXIT_DATA)
                pred = model.infer_multi(x, target, sources)
            times.append(time.time() - t0)
            labels.append(pred.argmax(dim=0).numpy().astype(np.uint8))
            n_written += 1
        d = out / sub / f"mod{target}"
        d.mkdir(parents=True, exist_ok=True)
        np.stack(labels).tofile(d / "mask.raw")
        h, w = labels[0].shape
        (d / "meta.txt").write_text(
            f"height={h}\nwidth={w}\nslices={len(labels)}\n"
            f"classes={ds.n_classes}\nsubject={sub}\nmodality={target}\n"
        )
    entries = {
        "command": "infer",
        "checkpoint": str(args.checkpoint),
        "checkpoint_hash": _hash_file(Path(args.checkpoint)),
        "mode": args.mode,
        "images": n_written,
        "mean_inference_ms": f"{1000 * float(np.mean(times)):.2f}",
        "max_inference_ms": f"{1000 * float(np.max(times)):.2f}",
    }
    write_manifest(out, entries)
    print(f"wrote {n_written} masks to {out} "
          f"(mean {1000 * float(np.mean(times)):.1f} ms/image)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

REPORT_KINDS = ("dice", "copy", "dcor", "panel", "probe", "zvar")


def cmd_evaluate(args) -> int:
    kinds = [k.strip() for k in args.report.split(",") if k.strip()]
    for kind in kinds:
        if kind not in REPORT_KINDS:
            raise CliError(f"unknown report kind: {kind!r}", EXIT_CONFIG)
    try:
        ds = data_mod.load_dataset(args.dataset)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_DATA)
    model = None
    if any(k != "copy" for k in kinds):
        if not args.checkpoint:
            raise CliError("this report kind needs --checkpoint", EXIT_CONFIG)
        model, _ = _load_checkpoint(args.checkpoint)
    if args.fold is not None:
        _, _, ds_eval = data_mod.split_dataset(ds, args.fold)
    else:
        ds_eval = ds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = []
    for kind in kinds:
        if kind == "dice":
            rep = eval_mod.evaluate_segmentation(
                model, ds_eval, args.target_modality, mode=args.mode
            )
            lines.append(f"dice.mean={rep.mean!r}")
            lines.append(f"dice.std_subjects={rep.std_across_subjects!r}")
            for i, v in enumerate(rep.per_class):
                lines.append(f"dice.class{i + 1}={v!r}")
            (out / "dice.txt").write_text("\n".join(rep.lines()) + "\n")
        elif kind == "copy":
            rep = eval_mod.copy_baseline(ds_eval)
            lines.append(f"copy.mean={rep.mean!r}")
            (out / "copy.txt").write_text("\n".join(rep.lines()) + "\n")
        elif kind == "dcor":
            val = eval_mod.model_distance_correlation(model, ds_eval, seed=args.seed)
            lines.append(f"dcor={val!r}")
        elif kind == "probe":
            rep = eval_mod.model_modality_probe(model, ds_eval, seed=args.seed)
            lines.append(f"probe.overall={rep.overall!r}")
            for i, v in enumerate(rep.per_dimension):
                lines.append(f"probe.dim{i}={v!r}")
        elif kind == "zvar":
            var = eval_mod.z_informativeness(model, ds_eval)
            for i, v in enumerate(var):
                lines.append(f"zvar.dim{i}={float(v)!r}")
        elif kind == "panel":
            from PIL import Image

            sample = ds_eval.volume(ds_eval.subjects()[0], args.target_modality)[0]
            rows = []
            for dim in range(model.config.z_dim):
                panel = eval_mod.latent_interpolation_panel(model, sample, dim)
                rows.append(eval_mod.panel_to_image(panel))
            grid = np.concatenate(rows, axis=0)
            Image.fromarray(grid).save(out / "panel.png")
            lines.append(f"panel=panel.png rows={model.config.z_dim}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    entries = {
        "command": "evaluate",
        "reports": ",".join(kinds),
        "dataset": str(args.dataset),
        "dataset_hash": hash_tree(args.dataset),
    }
    if args.checkpoint:
        entries["checkpoint_hash"] = _hash_file(Path(args.checkpoint))
    write_manifest(out, entries)
    for line in lines:
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuseseg",
        description="Multimodal semi-supervised segmentation on disentangled factors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--subjects", dest="n_subjects", type=int)
    p.add_argument("--slices", dest="slices_per_subject", type=int)
    p.add_argument("--misalignment", dest="misalignment_amplitude", type=float)
    p.add_argument("--noise", dest="noise_sigma", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--annotations", type=float)
    p.add_argument("--pairing", choices=("expert", "automated", "random"))
    p.add_argument("--decoder", choices=("film", "spade"))
    p.add_argument("--no-stn", action="store_true")
    p.add_argument("--ablate", action="append",
                   help="disable a loss term (repeatable)")
    p.add_argument("--fold", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write predicted masks for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("single", "multi"), default="single")
    p.add_argument("--target-modality", dest="target_modality", type=int, default=1)
    p.add_argument("--decoder", choices=("film", "spade"))
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="metric reports for a checkpoint/dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default="dice",
                   help="comma list of: " + ",".join(REPORT_KINDS))
    p.add_argument("--mode", choices=("single", "multi"), default="multi")
    p.add_argument("--target-modality", dest="target_modality", type=int, default=1)
    p.add_argument("--fold", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    out_root = os.environ.get("FUSESEG_OUT_ROOT")
    if out_root and getattr(args, "out", None):
        if not Path(args.out).is_absolute():
            args.out = str(Path(out_root) / args.out)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
