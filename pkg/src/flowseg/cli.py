"""Command-line workflows.

Subcommands wire the library into the end-to-end pipeline:

* demo-data   write synthetic sections for self-contained runs
* patchify    sections -> generative + segmentation patch datasets
* train-vae   mask model training on a generative dataset
* train-cnf   patch model training on a generative dataset
* generate    sample (mask, patch) pairs from the two checkpoints
* sweep       augmentation-size protocol on a segmentation dataset
* eval        per-split IoU of a predictor on a segmentation dataset

Configuration comes from an optional JSON file (--config) with
command-line flags (--seed, --out, --preset) overriding file values;
unknown config keys are rejected.  The resolved configuration is
serialized into the output directory.  Exit codes: 0 success, 2 usage
error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


class UsageError(Exception):
    """Invalid configuration or arguments (exit code 2)."""


COMMON_KEYS = {"seed", "out", "preset"}

COMMAND_KEYS = {
    "demo-data": {"height", "width", "count"},
    "patchify": {
        "sections", "patch", "gen_overlap", "seg_overlap",
        "filter_lo", "filter_hi", "threshold", "clip_lo", "clip_hi",
    },
    "train-vae": {
        "dataset", "resume", "checkpoint_every", "latent", "batch",
        "iterations", "lr0", "warmup", "enc_widths", "dec_widths", "limit",
    },
    "train-cnf": {
        "dataset", "resume", "checkpoint_every", "levels", "depth", "hidden",
        "prior_hidden", "aux_hidden", "bce_weight", "batch", "iterations",
        "lr0", "warmup", "limit",
    },
    "generate": {"vae_ckpt", "cnf_ckpt", "count", "temperature"},
    "sweep": {
        "dataset", "vae_ckpt", "cnf_ckpt", "generated_dataset", "temperature",
        "sizes", "trials_per_size", "epochs", "lr", "batch", "blocks",
        "filters", "save_selected", "threads",
    },
    "eval": {"dataset", "predictor", "unet_ckpt"},
}

DEFAULTS = {
    "demo-data": {"height": 64, "width": 256, "count": 1},
    "patchify": {
        "patch": 16, "gen_overlap": 0.9, "seg_overlap": 0.1,
        "filter_lo": 0.1, "filter_hi": 0.9,
        "threshold": None, "clip_lo": None, "clip_hi": None,
    },
    "train-vae": {"resume": False, "checkpoint_every": 500, "limit": None},
    "train-cnf": {"resume": False, "checkpoint_every": 500, "limit": None},
    "generate": {"count": 100, "temperature": 1.0},
    "sweep": {
        "temperature": 1.0, "sizes": [0, 25, 50, 100], "trials_per_size": 3,
        "epochs": 3, "lr": 1e-3, "batch": 16, "blocks": 2, "filters": 8,
        "save_selected": False, "threads": None,
    },
    "eval": {"predictor": "oracle"},
}


def resolve_config(command: str, args) -> dict:
    cfg = {"seed": 0, "preset": "desk"}
    cfg.update(DEFAULTS.get(command, {}))
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise UsageError(f"config file is not valid JSON: {exc}") from None
        allowed = COMMAND_KEYS[command] | COMMON_KEYS
        unknown = set(file_cfg) - allowed
        if unknown:
            raise UsageError(
                f"unknown config keys for {command}: {sorted(unknown)}; "
                f"allowed: {sorted(allowed)}"
            )
        cfg.update(file_cfg)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.preset is not None:
        cfg["preset"] = args.preset
    if "out" not in cfg:
        raise UsageError("an output directory is required (--out or config key 'out')")
    return cfg


def _write_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


def _load_generative(dataset_dir: str):
    from flowseg.data import load_dataset

    if not os.path.exists(os.path.join(dataset_dir, "manifest.json")):
        raise FileNotFoundError(f"dataset not found: {dataset_dir}")
    ds = load_dataset(dataset_dir)
    pairs = [p for split in sorted(ds.pairs) for p in ds.pairs[split]]
    if not pairs:
        raise ValueError(f"dataset at {dataset_dir} has no pairs")
    patch = ds.manifest["patch"]
    xs = np.stack([p.x for p in pairs])[:, None]
    ys = np.stack([p.y for p in pairs])[:, None]
    return xs, ys, patch


def cmd_demo_data(cfg: dict) -> int:
    from flowseg.demo import write_demo_bundle

    out = cfg["out"]
    _write_config(cfg, out)
    for i in range(int(cfg["count"])):
        desc = write_demo_bundle(out, int(cfg["height"]), int(cfg["width"]),
                                 int(cfg["seed"]) + i)
        print(f"wrote {desc}")
    return 0


def cmd_patchify(cfg: dict) -> int:
    from flowseg.data import (
        DataConfig, build_datasets, load_section, save_dataset, source_hashes,
    )

    for key in ("gen_overlap", "seg_overlap"):
        if not 0.0 <= float(cfg[key]) < 1.0:
            raise UsageError(f"{key} must be in [0, 1), got {cfg[key]}")
    if not 0.0 <= float(cfg["filter_lo"]) < float(cfg["filter_hi"]) <= 1.0:
        raise UsageError("filter bounds must satisfy 0 <= lo < hi <= 1")
    if int(cfg["patch"]) < 1:
        raise UsageError(f"patch must be positive, got {cfg['patch']}")
    paths = cfg.get("sections") or []
    if not paths:
        raise UsageError("patchify needs a nonempty 'sections' list in the config")
    out = cfg["out"]
    _write_config(cfg, out)

    sections, hashes = [], {}
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(f"section descriptor not found: {path}")
        sections.append(load_section(path, cfg["threshold"], cfg["clip_lo"], cfg["clip_hi"]))
        hashes.update(source_hashes(path))

    dconf = DataConfig(
        patch=int(cfg["patch"]), gen_overlap=float(cfg["gen_overlap"]),
        seg_overlap=float(cfg["seg_overlap"]), filter_lo=float(cfg["filter_lo"]),
        filter_hi=float(cfg["filter_hi"]), seed=int(cfg["seed"]),
    )
    gen, seg = build_datasets(sections, dconf)
    save_dataset(gen, os.path.join(out, "generative"), {"sources": hashes})
    save_dataset(seg, os.path.join(out, "segmentation"), {"sources": hashes})
    for name, ds in (("generative", gen), ("segmentation", seg)):
        counts = ds.counts()
        total = sum(counts.values())
        print(f"{name}: {total} pairs " + json.dumps(counts, sort_keys=True))
    return 0


def cmd_train_vae(cfg: dict) -> int:
    from flowseg.report import plot_training_log
    from flowseg.vae import train_vae, vae_preset

    if "dataset" not in cfg:
        raise UsageError("train-vae needs a 'dataset' config key")
    _, ys, patch = _load_generative(cfg["dataset"])
    overrides = {}
    for key in ("latent", "batch", "iterations", "lr0", "warmup"):
        if key in cfg:
            overrides[key] = cfg[key]
    for key in ("enc_widths", "dec_widths"):
        if key in cfg:
            overrides[key] = tuple(cfg[key])
    try:
        vconf = vae_preset(cfg["preset"], patch=patch, seed=int(cfg["seed"]), **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = cfg["out"]
    _write_config(cfg, out)
    last = {}
    ckpt = train_vae(
        ys[:, 0], vconf, out, resume=bool(cfg["resume"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        limit=cfg["limit"], log_cb=last.update,
    )
    plot_training_log(os.path.join(out, "train_log.jsonl"), os.path.join(out, "train_log.png"))
    if last:
        print(f"iter {last['iter']}: loss {last['loss']:.4f} "
              f"(recon {last['recon']:.4f}, kl {last['kl']:.4f})")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_cnf(cfg: dict) -> int:
    from flowseg.cnf import cnf_preset, train_cnf
    from flowseg.report import plot_training_log

    if "dataset" not in cfg:
        raise UsageError("train-cnf needs a 'dataset' config key")
    xs, ys, patch = _load_generative(cfg["dataset"])
    overrides = {}
    for key in ("levels", "depth", "hidden", "prior_hidden", "aux_hidden",
                "bce_weight", "batch", "iterations", "lr0", "warmup"):
        if key in cfg:
            overrides[key] = cfg[key]
    try:
        cconf = cnf_preset(cfg["preset"], patch=patch, seed=int(cfg["seed"]), **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = cfg["out"]
    _write_config(cfg, out)
    last = {}
    ckpt = train_cnf(
        xs, ys, cconf, out, resume=bool(cfg["resume"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        limit=cfg["limit"], log_cb=last.update,
    )
    plot_training_log(os.path.join(out, "train_log.jsonl"), os.path.join(out, "train_log.png"))
    if last:
        print(f"iter {last['iter']}: loss {last['loss']:.4f} "
              f"(bpd {last['nll_bpd']:.4f}, bce {last['bce']:.4f})")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_generators(cfg: dict):
    from flowseg.cnf import CnfModel
    from flowseg.vae import VaeModel

    vae, _, _ = VaeModel.load(cfg["vae_ckpt"])
    cnf, _, _ = CnfModel.load(cfg["cnf_ckpt"])
    if vae.config.patch != cnf.config.patch:
        raise ValueError(
            f"patch-size mismatch: mask model {vae.config.patch}, "
            f"patch model {cnf.config.patch}"
        )
    return vae, cnf


def _sample_pairs(vae, cnf, count: int, temperature: float, seed: int):
    from flowseg.data import PatchPair

    masks = vae.sample(count, seed=seed)
    if count == 0:
        return []
    patches = cnf.sample(masks[:, None], temperature=temperature, seed=seed)
    return [
        PatchPair(x=patches[i, 0], y=masks[i], origin=(i, 0, -1, False))
        for i in range(count)
    ]


def cmd_generate(cfg: dict) -> int:
    from flowseg.ckpt import checkpoint_digest
    from flowseg.data import PatchDataset, save_dataset
    from flowseg.report import plot_pair_montage

    for key in ("vae_ckpt", "cnf_ckpt"):
        if key not in cfg:
            raise UsageError(f"generate needs a {key!r} config key")
    count = int(cfg["count"])
    if count < 0:
        raise UsageError(f"count must be nonnegative, got {count}")
    temperature = float(cfg["temperature"])
    if temperature < 0:
        raise UsageError(f"temperature must be nonnegative, got {temperature}")
    vae, cnf = _load_generators(cfg)
    out = cfg["out"]
    _write_config(cfg, out)
    pairs = _sample_pairs(vae, cnf, count, temperature, int(cfg["seed"]))
    ds = PatchDataset(
        {"generated": pairs},
        {
            "kind": "generated",
            "patch": vae.config.patch,
            "count": count,
            "temperature": temperature,
            "seed": int(cfg["seed"]),
            "vae_checkpoint": checkpoint_digest(cfg["vae_ckpt"]),
            "cnf_checkpoint": checkpoint_digest(cfg["cnf_ckpt"]),
        },
    )
    save_dataset(ds, out)
    if pairs:
        plot_pair_montage(pairs, os.path.join(out, "pairs.png"))
    print(f"generated {count} pairs -> {out}")
    return 0


def _checkpoint_generator(vae, cnf, temperature: float, seed: int, chunk: int = 64):
    """Endless stream of generated pairs, deterministic in draw order."""
    i = 0
    while True:
        chunk_seed = int(np.random.SeedSequence([seed, 0x6E4, i]).generate_state(1)[0])
        for p in _sample_pairs(vae, cnf, chunk, temperature, chunk_seed):
            yield p
        i += 1


def cmd_sweep(cfg: dict) -> int:
    from flowseg.data import load_dataset
    from flowseg.report import plot_sweep
    from flowseg.segeval import (
        UNetConfig, augmentation_sweep, save_unet, train_segmenter,
        trial_seed, write_sweep_report,
    )

    if "dataset" not in cfg:
        raise UsageError("sweep needs a 'dataset' config key (segmentation dataset)")
    sizes = [int(s) for s in cfg["sizes"]]
    if any(s < 0 for s in sizes):
        raise UsageError("sizes must be nonnegative")
    seg = load_dataset(cfg["dataset"])
    for split in ("train", "val"):
        if not seg.pairs.get(split):
            raise ValueError(f"segmentation dataset is missing split {split!r}")

    pool = None
    if cfg.get("generated_dataset"):
        gen_ds = load_dataset(cfg["generated_dataset"])
        pool = [p for split in sorted(gen_ds.pairs) for p in gen_ds.pairs[split]]
        generator = iter(pool)
    elif cfg.get("vae_ckpt") and cfg.get("cnf_ckpt"):
        vae, cnf = _load_generators(cfg)
        generator = _checkpoint_generator(vae, cnf, float(cfg["temperature"]), int(cfg["seed"]))
    else:
        raise UsageError(
            "sweep needs either 'generated_dataset' or both 'vae_ckpt' and 'cnf_ckpt'"
        )

    out = cfg["out"]
    _write_config(cfg, out)
    ucfg = UNetConfig(blocks=int(cfg["blocks"]), filters=int(cfg["filters"]))
    results = augmentation_sweep(
        seg.pairs["train"], seg.pairs["val"], generator, sizes,
        trials_per_size=int(cfg["trials_per_size"]), epochs=int(cfg["epochs"]),
        lr=float(cfg["lr"]), seed=int(cfg["seed"]), batch=int(cfg["batch"]),
        config=ucfg, threads=cfg["threads"],
    )
    write_sweep_report(results, os.path.join(out, "sweep.json"), os.path.join(out, "sweep.csv"))
    plot_sweep(results, os.path.join(out, "sweep.png"))
    for r in results:
        print(f"size {r.size}: train {r.trials[r.selected]:.4f} "
              f"(trial {r.selected}), val {r.val_iou:.4f}")

    if cfg["save_selected"]:
        best = max(results, key=lambda r: r.val_iou)
        if pool is None:
            vae, cnf = _load_generators(cfg)
            generator = _checkpoint_generator(vae, cnf, float(cfg["temperature"]), int(cfg["seed"]))
            pool = []
            need = sum(sizes) * int(cfg["trials_per_size"])
            for p in generator:
                pool.append(p)
                if len(pool) >= need:
                    break
        offset = 0
        aug = []
        for size in sizes:
            for trial in range(int(cfg["trials_per_size"])):
                if size == best.size and trial == best.selected:
                    aug = pool[offset : offset + size]
                offset += size
        model, _, _ = train_segmenter(
            seg.pairs["train"], seg.pairs["val"], aug, epochs=int(cfg["epochs"]),
            lr=float(cfg["lr"]), seed=best.trial_seeds[best.selected],
            batch=int(cfg["batch"]), config=ucfg,
        )
        save_unet(model, os.path.join(out, "model"),
                  {"size": best.size, "trial": best.selected, "val_iou": best.val_iou})
        print(f"saved selected model (size {best.size}) -> {os.path.join(out, 'model')}")
    return 0


def cmd_eval(cfg: dict) -> int:
    from flowseg.data import load_dataset
    from flowseg.report import plot_eval_bars
    from flowseg.segeval import iou_at_threshold, load_unet, mean_iou

    if "dataset" not in cfg:
        raise UsageError("eval needs a 'dataset' config key")
    predictor = cfg["predictor"]
    if predictor not in ("oracle", "unet"):
        raise UsageError(f"predictor must be 'oracle' or 'unet', got {predictor!r}")
    if predictor == "unet" and "unet_ckpt" not in cfg:
        raise UsageError("eval with predictor 'unet' needs 'unet_ckpt'")
    ds = load_dataset(cfg["dataset"])
    out = cfg["out"]
    _write_config(cfg, out)
    model = None
    if predictor == "unet":
        model, _ = load_unet(cfg["unet_ckpt"])
    ious = {}
    for split in sorted(ds.pairs):
        pairs = ds.pairs[split]
        if not pairs:
            continue
        if predictor == "oracle":
            ious[split] = float(np.mean([iou_at_threshold(p.y, p.y) for p in pairs]))
        else:
            ious[split] = mean_iou(model, pairs)
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(ious, fh, sort_keys=True, indent=1)
        fh.write("\n")
    plot_eval_bars(ious, os.path.join(out, "eval.png"))
    for split in sorted(ious):
        print(f"{split}: IoU {ious[split]:.4f}")
    return 0


HANDLERS = {
    "demo-data": cmd_demo_data,
    "patchify": cmd_patchify,
    "train-vae": cmd_train_vae,
    "train-cnf": cmd_train_cnf,
    "generate": cmd_generate,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowseg",
        description="Patch-generative augmentation pipeline for salt segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name, help=f"run the {name} workflow")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="random seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--preset", choices=["desk", "paper"],
                       help="model size preset (overrides config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
