"""Segmentation consumer for augmentation studies.

A small U-net-style segmenter (configurable block count and base filter
width), the IoU-at-threshold metric, deterministic training, and the
augmentation-size sweep: for each requested size draw that many
generated pairs, train several independent segmenters, keep the one
with the second-best training IoU, and score it on the validation set.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

import flowseg.tensor as T
from flowseg.tensor import Adam, ShapeError, Var


def iou_at_threshold(pred_probs: np.ndarray, gt_mask: np.ndarray, thr: float = 0.5) -> float:
    """Intersection over union of the thresholded prediction and the mask.

    Both masks empty counts as perfect agreement (1.0).
    """
    pred_probs = np.asarray(pred_probs, dtype=float)
    gt_mask = np.asarray(gt_mask, dtype=float)
    if pred_probs.shape != gt_mask.shape:
        raise ShapeError(
            f"iou: prediction shape {pred_probs.shape} != mask shape {gt_mask.shape}"
        )
    bad = (gt_mask != 0.0) & (gt_mask != 1.0)
    if bad.any():
        raise ValueError("iou: ground-truth mask must be binary")
    p = pred_probs >= thr
    g = gt_mask == 1.0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class UNetConfig:
    blocks: int = 2
    filters: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.blocks < 1 or self.filters < 1:
            raise ValueError("unet: blocks and filters must be positive")


def unet_preset(name: str, **overrides) -> UNetConfig:
    if name == "desk":
        cfg = UNetConfig(blocks=2, filters=8)
    elif name == "paper":
        cfg = UNetConfig(blocks=4, filters=65)
    else:
        raise ValueError(f"unet: unknown preset {name!r}")
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValueError(f"unet: unknown config field {k!r}")
        setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


def _xavier(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    fan_out = shape[0] * int(np.prod(shape[2:]))
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def _avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    r = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return T.sum(r, axis=(3, 5)) * 0.25


class UNetModel:
    """Encoder-decoder segmenter with skip connections.

    Each encoder block is two 3x3 conv + ReLU stages followed by 2x2
    average pooling; filter counts double per block.  Decoder blocks
    upsample with a learned stride-2 transposed convolution, concatenate
    the matching skip, and apply two conv + ReLU stages.  A final 1x1
    convolution produces one-channel logits at the input resolution.
    """

    def __init__(self, config: UNetConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x04E7]))
        self.params: list[tuple[str, Var]] = []
        B, F = config.blocks, config.filters

        def conv_p(name, c_out, c_in, k):
            w = Var(_xavier(rng, (c_out, c_in, k, k)), name=f"{name}.w")
            b = Var(np.zeros(c_out), name=f"{name}.b")
            self.params += [(w.name, w), (b.name, b)]
            return w, b

        def tconv_p(name, c_in, c_out):
            w = Var(_xavier(rng, (c_in, c_out, 2, 2)), name=f"{name}.w")
            b = Var(np.zeros(c_out), name=f"{name}.b")
            self.params += [(w.name, w), (b.name, b)]
            return w, b

        self.enc = []
        c_in = 1
        for i in range(B):
            ch = F * 2**i
            self.enc.append((conv_p(f"enc{i}a", ch, c_in, 3), conv_p(f"enc{i}b", ch, ch, 3)))
            c_in = ch
        mid = F * 2**B
        self.mid = (conv_p("mida", mid, c_in, 3), conv_p("midb", mid, mid, 3))
        self.dec = []
        cur = mid
        for i in reversed(range(B)):
            ch = F * 2**i
            up = tconv_p(f"up{i}", cur, ch)
            a = conv_p(f"dec{i}a", ch, 2 * ch, 3)
            b = conv_p(f"dec{i}b", ch, ch, 3)
            self.dec.append((up, a, b))
            cur = ch
        self.head = conv_p("head", 1, F, 1)

    def parameters(self) -> list[tuple[str, Var]]:
        return list(self.params)

    def param_count(self) -> int:
        return int(sum(p.value.size for _, p in self.params))

    def forward(self, x) -> Var:
        x = T.as_var(x)
        if len(x.shape) != 4 or x.shape[1] != 1:
            raise ShapeError(f"unet: expected (n, 1, h, w) input, got {x.shape}")
        n, _, h, w = x.shape
        div = 2**self.config.blocks
        if h % div or w % div:
            raise ShapeError(
                f"unet: spatial dims {(h, w)} must be divisible by 2^blocks = {div}"
            )
        skips = []
        cur = x
        for (wa, ba), (wb, bb) in self.enc:
            cur = T.relu(T.conv2d(cur, wa, ba, padding=1))
            cur = T.relu(T.conv2d(cur, wb, bb, padding=1))
            skips.append(cur)
            cur = _avg_pool(cur)
        (wa, ba), (wb, bb) = self.mid
        cur = T.relu(T.conv2d(cur, wa, ba, padding=1))
        cur = T.relu(T.conv2d(cur, wb, bb, padding=1))
        for (uw, ub), (wa, ba), (wb, bb) in self.dec:
            cur = T.transposed_conv2d(cur, uw, ub, stride=2)
            cur = T.concat([cur, skips.pop()], axis=1)
            cur = T.relu(T.conv2d(cur, wa, ba, padding=1))
            cur = T.relu(T.conv2d(cur, wb, bb, padding=1))
        hw, hb = self.head
        return T.conv2d(cur, hw, hb)

    def predict_probs(self, x: np.ndarray) -> np.ndarray:
        logits = self.forward(np.asarray(x, dtype=float)).value
        return 1.0 / (1.0 + np.exp(-logits))


def _stack(pairs) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([p.x for p in pairs])[:, None]
    ys = np.stack([p.y for p in pairs])[:, None]
    return xs, ys


def mean_iou(model: UNetModel, pairs, batch: int = 64) -> float:
    """Mean IoU@0.5 over a list of pairs."""
    vals = []
    for i in range(0, len(pairs), batch):
        chunk = pairs[i : i + batch]
        xs, ys = _stack(chunk)
        probs = model.predict_probs(xs)
        vals += [iou_at_threshold(probs[j, 0], ys[j, 0]) for j in range(len(chunk))]
    return float(np.mean(vals))


def train_segmenter(
    train_pairs,
    val_pairs,
    aug_pairs=(),
    epochs: int = 3,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 16,
    config: UNetConfig | None = None,
) -> tuple[UNetModel, float, float]:
    """Train on originals plus augmentations with per-pixel BCE.

    Returns (model, mean train IoU over the concatenated training data,
    mean validation IoU).  Fully deterministic given the seed; the input
    pair lists are never mutated.
    """
    if len(train_pairs) == 0:
        raise ValueError("segmenter: empty training set")
    data = list(train_pairs) + list(aug_pairs)
    cfg = config or UNetConfig(seed=seed)
    if config is not None and config.seed != seed:
        cfg = UNetConfig(blocks=config.blocks, filters=config.filters, seed=seed)
    model = UNetModel(cfg)
    opt = Adam(model.parameters())
    xs, ys = _stack(data)
    n = len(data)
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6, epoch])).permutation(n)
        for i in range(0, n, batch):
            idx = order[i : i + batch]
            logits = model.forward(xs[idx])
            target = Var(ys[idx])
            loss = T.mean(T.softplus(logits) - target * logits)
            if not np.isfinite(loss.value):
                raise ValueError(f"segmenter: non-finite loss at epoch {epoch}")
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr)
    train_iou = mean_iou(model, data)
    val_iou = mean_iou(model, val_pairs) if len(val_pairs) else float("nan")
    return model, train_iou, val_iou


def select_second_best(train_ious) -> int:
    """Index of the trial ranked second by training IoU (stable sort,
    descending); with a single trial, that trial."""
    if len(train_ious) == 0:
        raise ValueError("selection: no trials")
    order = sorted(range(len(train_ious)), key=lambda i: -train_ious[i])
    return order[1] if len(order) > 1 else order[0]


def trial_seed(seed: int, size: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, size, trial]).generate_state(1)[0])


@dataclass
class SweepResult:
    size: int
    trials: list  # train IoU per trial
    selected: int
    val_iou: float
    trial_seeds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trials": [float(v) for v in self.trials],
            "selected": int(self.selected),
            "val_iou": float(self.val_iou),
        }


def _thread_cap(requested: int | None) -> int:
    cap = os.environ.get("FLOWSEG_THREADS")
    workers = requested if requested else (os.cpu_count() or 1)
    if cap is not None:
        workers = min(workers, max(1, int(cap)))
    return max(1, workers)


def augmentation_sweep(
    train_pairs,
    val_pairs,
    generator,
    sizes,
    trials_per_size: int = 10,
    epochs: int = 3,
    lr: float = 1e-3,
    seed: int = 0,
    batch: int = 16,
    config: UNetConfig | None = None,
    threads: int | None = None,
) -> list:
    """Run the augmentation-size protocol.

    For every size, each of trials_per_size trials draws `size` fresh
    pairs from the generator, trains its own segmenter, and reports the
    training IoU; the trial with the second-best training IoU is scored
    on the validation set.  Draws happen serially in call order, so the
    result is independent of the thread count.
    """
    gen_iter = iter(generator)
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes):
        raise ValueError("sweep: sizes must be nonnegative")
    jobs = []
    drawn = 0
    for size in sizes:
        for trial in range(trials_per_size):
            aug = []
            for _ in range(size):
                try:
                    aug.append(next(gen_iter))
                except StopIteration:
                    raise ValueError(
                        f"sweep: generator exhausted after {drawn} draws; "
                        f"need {sum(sizes) * trials_per_size} in total"
                    ) from None
                drawn += 1
            jobs.append((size, trial, aug))

    def run(job):
        size, trial, aug = job
        ts = trial_seed(seed, size, trial)
        model, train_iou, val_iou = train_segmenter(
            train_pairs, val_pairs, aug, epochs=epochs, lr=lr, seed=ts,
            batch=batch, config=config,
        )
        return (size, trial), (train_iou, val_iou, ts)

    workers = _thread_cap(threads)
    if workers == 1:
        outcomes = dict(run(j) for j in jobs)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = dict(pool.map(run, jobs))

    results = []
    for size in sizes:
        train_ious = [outcomes[(size, t)][0] for t in range(trials_per_size)]
        seeds = [outcomes[(size, t)][2] for t in range(trials_per_size)]
        sel = select_second_best(train_ious)
        results.append(
            SweepResult(
                size=size,
                trials=train_ious,
                selected=sel,
                val_iou=outcomes[(size, sel)][1],
                trial_seeds=seeds,
            )
        )
    return results


def save_unet(model: UNetModel, path: str, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict

    from flowseg.ckpt import save_checkpoint

    meta = {"kind": "unet", "config": asdict(model.config)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, meta, {name: p.value for name, p in model.params})


def load_unet(path: str) -> tuple[UNetModel, dict]:
    from flowseg.ckpt import load_checkpoint

    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "unet":
        raise ValueError(f"unet: checkpoint at {path} has kind {meta.get('kind')!r}")
    model = UNetModel(UNetConfig(**meta["config"]))
    for name, p in model.params:
        if name not in arrays:
            raise ValueError(f"unet: checkpoint missing array {name!r}")
        p.value = arrays[name].astype(p.value.dtype)
    return model, meta


def write_sweep_report(results, json_path: str, csv_path: str) -> None:
    """JSON keyed by size plus a CSV with one row per size."""
    report = {str(r.size): r.to_dict() for r in results}
    os.makedirs(os.path.dirname(json_path) or ".", exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write("size,train_iou_selected,val_iou\n")
        for r in results:
            fh.write(f"{r.size},{r.trials[r.selected]:.10g},{r.val_iou:.10g}\n")
