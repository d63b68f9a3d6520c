"""Mask-conditioned flow model: exact likelihood, training, and sampling.

The invertible backbone maps a patch to latents; the conditioning enters only
through the base density, whose mean and deviation come from a small
convolutional network reading the mask.  A transposed-convolution auxiliary
head decodes the final latent back to mask logits for the binary
cross-entropy regularizer.  Intermediate factored-out latents are scored
under a standard normal; only the final latent is conditional.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

import flowseg.tensor as T
from flowseg.ckpt import MANIFEST as MANIFEST_NAME
from flowseg.ckpt import load_checkpoint, save_checkpoint
from flowseg.flows import MultiScaleFlow, xavier_normal
from flowseg.tensor import Adam, ShapeError, Var, poly_decay_lr
from flowseg.tensor.conv import conv2d_np, transposed_conv2d_np

LOG_2PI = float(np.log(2.0 * np.pi))


def cond_gaussian_logprob(z: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Sum over elements of log N(z; mu, sigma)."""
    z, mu, sigma = np.asarray(z), np.asarray(mu), np.asarray(sigma)
    if z.shape != mu.shape or z.shape != sigma.shape:
        raise ShapeError(f"cond_gaussian_logprob: shapes {z.shape}, {mu.shape}, {sigma.shape} differ")
    if np.any(sigma <= 0):
        raise ValueError("cond_gaussian_logprob: sigma must be positive everywhere")
    return float(np.sum(-0.5 * LOG_2PI - np.log(sigma) - (z - mu) ** 2 / (2.0 * sigma**2)))


def binary_cross_entropy_np(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean BCE between sigmoid(logits) and binary targets, overflow-safe."""
    sp = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return float(np.mean(sp - y * logits))


def _check_binary(y: np.ndarray, what: str) -> None:
    if np.abs(y - np.round(y)).max() > 1e-6 or y.min() < -1e-6 or y.max() > 1.0 + 1e-6:
        raise ValueError(f"{what}: mask values must be 0 or 1")


@dataclass
class CnfConfig:
    patch: int = 16
    levels: int = 2
    depth: int = 4
    hidden: int = 32
    prior_hidden: int = 32
    aux_hidden: int = 16
    bce_weight: float = 1.0
    lr0: float = 1e-3
    warmup: int = 100
    iterations: int = 2000
    batch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.patch % (2**self.levels):
            raise ValueError(f"cnf: patch {self.patch} not divisible by 2^levels = {2 ** self.levels}")


def cnf_preset(name: str, **overrides) -> CnfConfig:
    if name == "desk":
        cfg = CnfConfig()
    elif name == "paper":
        cfg = CnfConfig(
            patch=64,
            levels=4,
            depth=15,
            hidden=64,
            prior_hidden=64,
            aux_hidden=64,
            lr0=1e-4,
            warmup=0,
            iterations=396_800,
            batch=50,
        )
    else:
        raise ValueError(f"cnf: unknown preset {name!r} (expected desk or paper)")
    return replace(cfg, **overrides) if overrides else cfg


class PriorNetwork:
    """Mask -> (mu, log sigma) for the final latent.

    Stacked stride-2 3x3 convolutions, one per resolution halving, then a
    zero-initialized 1x1 convolution so the base density starts standard
    normal.  Output channels are twice the latent's.
    """

    def __init__(self, z_channels: int, halvings: int, hidden: int, rng: np.random.Generator, name: str = "prior"):
        self.z_channels = z_channels
        self.halvings = halvings
        self.name = name
        self.layers: list[tuple[Var, Var]] = []
        c_in = 1
        for i in range(halvings):
            w = Var(xavier_normal(rng, (hidden, c_in, 3, 3)), name=f"{name}.w{i}")
            b = Var(np.zeros(hidden), name=f"{name}.b{i}")
            self.layers.append((w, b))
            c_in = hidden
        self.w_out = Var(np.zeros((2 * z_channels, c_in, 1, 1)), name=f"{name}.w_out")
        self.b_out = Var(np.zeros(2 * z_channels), name=f"{name}.b_out")

    def forward(self, y: Var) -> tuple[Var, Var]:
        h = y
        for w, b in self.layers:
            h = T.relu(T.conv2d(h, w, b, stride=2, padding=1))
        out = T.conv2d(h, self.w_out, self.b_out)
        c = self.z_channels
        return out[:, :c], out[:, c:]

    def forward_np(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = y
        for w, b in self.layers:
            h = np.maximum(conv2d_np(h, w.value, b.value, 2, 1), 0.0)
        out = conv2d_np(h, self.w_out.value, self.b_out.value, 1, 0)
        c = self.z_channels
        return out[:, :c], out[:, c:]

    def parameters(self):
        out = []
        for w, b in self.layers:
            out += [(w.name, w), (b.name, b)]
        out += [(self.w_out.name, self.w_out), (self.b_out.name, self.b_out)]
        return out


class AuxNetwork:
    """Final latent -> mask logits, one stride-2 transposed conv per
    resolution doubling, then a 3x3 convolution to a single channel."""

    def __init__(self, z_channels: int, doublings: int, hidden: int, rng: np.random.Generator, name: str = "auxnet"):
        self.name = name
        self.tlayers: list[tuple[Var, Var]] = []
        c_in = z_channels
        for i in range(doublings):
            w = Var(xavier_normal(rng, (c_in, hidden, 3, 3)), name=f"{name}.tw{i}")
            b = Var(np.zeros(hidden), name=f"{name}.tb{i}")
            self.tlayers.append((w, b))
            c_in = hidden
        self.w_out = Var(xavier_normal(rng, (1, c_in, 3, 3)), name=f"{name}.w_out")
        self.b_out = Var(np.zeros(1), name=f"{name}.b_out")

    def forward(self, z: Var) -> Var:
        h = z
        for w, b in self.tlayers:
            h = T.relu(T.transposed_conv2d(h, w, b, stride=2, padding=1, output_padding=1))
        return T.conv2d(h, self.w_out, self.b_out, padding=1)

    def forward_np(self, z: np.ndarray) -> np.ndarray:
        h = z
        for w, b in self.tlayers:
            h = np.maximum(transposed_conv2d_np(h, w.value, b.value, 2, 1, 1), 0.0)
        return conv2d_np(h, self.w_out.value, self.b_out.value, 1, 1)

    def parameters(self):
        out = []
        for w, b in self.tlayers:
            out += [(w.name, w), (b.name, b)]
        out += [(self.w_out.name, self.w_out), (self.b_out.name, self.b_out)]
        return out


class CnfModel:
    def __init__(self, config: CnfConfig):
        self.config = config
        self.flow = MultiScaleFlow(
            levels=config.levels,
            depth=config.depth,
            in_channels=1,
            hidden=config.hidden,
            seed=config.seed,
        )
        zc, zh, zw = self.flow.z_shapes(config.patch, config.patch)[-1]
        self.z_k_shape = (zc, zh, zw)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC4F]))
        self.prior = PriorNetwork(zc, config.levels, config.prior_hidden, rng)
        self.aux = AuxNetwork(zc, config.levels, config.aux_hidden, rng)

    # ---- shape plumbing ----

    def _check_mask(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=T.default_dtype())
        if y.ndim == 3:
            y = y[:, None]
        p = self.config.patch
        if y.ndim != 4 or y.shape[1] != 1 or y.shape[2] != p or y.shape[3] != p:
            raise ShapeError(f"cnf: mask batch must be (n, 1, {p}, {p}), got {y.shape}")
        return y

    def _check_patch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=T.default_dtype())
        if x.ndim == 3:
            x = x[:, None]
        p = self.config.patch
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != p or x.shape[3] != p:
            raise ShapeError(f"cnf: patch batch must be (n, 1, {p}, {p}), got {x.shape}")
        return x

    def prior_params_np(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) of the conditional base density for each mask."""
        y = self._check_mask(y)
        mu, log_sigma = self.prior.forward_np(y)
        return mu, np.exp(log_sigma)

    # ---- likelihood ----

    def _loglik_terms(self, z_parts: list[Var], z_k: Var, logdet: Var, y: np.ndarray):
        mu, log_sigma = self.prior.forward(Var(y))
        diff = z_k - mu
        d_k = int(np.prod(z_k.shape[1:]))
        lp = T.sum(-log_sigma - 0.5 * diff * diff * T.exp(-2.0 * log_sigma), axis=(1, 2, 3))
        lp = lp + (-0.5 * LOG_2PI * d_k)
        for z in z_parts:
            d_p = int(np.prod(z.shape[1:]))
            lp = lp + (T.sum(z * z, axis=(1, 2, 3)) * -0.5 + (-0.5 * LOG_2PI * d_p))
        return lp + logdet

    def nll(self, x, y: np.ndarray, init_actnorm: bool = False):
        """Per-sample negative log-likelihood and bits per dimension (tape route)."""
        x = x if isinstance(x, Var) else Var(self._check_patch(x))
        y = self._check_mask(y)
        z_parts, z_k, logdet = self.flow.forward(x, init_actnorm=init_actnorm)
        loglik = self._loglik_terms(z_parts, z_k, logdet, y)
        nll = -loglik
        dim = float(np.prod(x.shape[1:]))
        bpd = nll * (1.0 / (dim * np.log(2.0)))
        return nll, bpd, z_parts, z_k

    def nll_np(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample nll/bpd without building a tape."""
        x = self._check_patch(x)
        y = self._check_mask(y)
        z_parts, z_k, logdet = self.flow.forward_np(x)
        mu, log_sigma = self.prior.forward_np(y)
        lp = np.sum(
            -0.5 * LOG_2PI - log_sigma - 0.5 * (z_k - mu) ** 2 * np.exp(-2.0 * log_sigma), axis=(1, 2, 3)
        )
        for z in z_parts:
            lp = lp + np.sum(-0.5 * LOG_2PI - 0.5 * z * z, axis=(1, 2, 3))
        nll = -(lp + logdet)
        dim = float(np.prod(x.shape[1:]))
        return nll, nll / (dim * np.log(2.0))

    def aux_bce(self, z_k: Var, y: np.ndarray) -> Var:
        """Mean BCE of the auxiliary mask decoding against the conditioning mask."""
        y = self._check_mask(y)
        _check_binary(y, "aux_bce")
        logits = self.aux.forward(z_k)
        if logits.shape != y.shape:
            raise ShapeError(f"aux_bce: logits {logits.shape} vs mask {y.shape}")
        return T.mean(T.softplus(logits) - Var(y) * logits)

    # ---- training ----

    def parameters(self):
        return self.flow.parameters() + self.prior.parameters() + self.aux.parameters()

    def train_step(self, opt: Adam, x: np.ndarray, y: np.ndarray, it: int) -> dict:
        cfg = self.config
        lr = poly_decay_lr(it, cfg.iterations, cfg.lr0, cfg.warmup)
        nll, bpd, _, z_k = self.nll(x, y, init_actnorm=(it == 0))
        mean_nll = T.mean(nll)
        bce = self.aux_bce(z_k, y)
        loss = mean_nll + bce * cfg.bce_weight if cfg.bce_weight != 0.0 else mean_nll
        if not np.isfinite(loss.value):
            raise ValueError(f"cnf: non-finite loss at iteration {it}")
        opt.zero_grad()
        T.backward(loss)
        opt.step(lr)
        return {
            "iter": it,
            "loss": float(loss.value),
            "nll_bpd": float(np.mean(bpd.value)),
            "bce": float(bce.value),
            "lr": lr,
        }

    def loss_np(self, x: np.ndarray, y: np.ndarray) -> float:
        """Total training loss (mean nll + weighted BCE) without a tape.

        Finite-difference oracles probe this route against the tape route.
        """
        x = self._check_patch(x)
        y = self._check_mask(y)
        nll, _ = self.nll_np(x, y)
        _, z_k, _ = self.flow.forward_np(x)
        bce = binary_cross_entropy_np(self.aux.forward_np(z_k), y)
        return float(np.mean(nll) + self.config.bce_weight * bce)

    # ---- sampling ----

    def sample(self, y: np.ndarray, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        """Draw one patch per mask; deterministic for a fixed seed."""
        if temperature < 0:
            raise ValueError(f"cnf: temperature must be >= 0, got {temperature}")
        y = self._check_mask(y)
        n = y.shape[0]
        mu, sigma = self.prior_params_np(y)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A11]))
        shapes = self.flow.z_shapes(self.config.patch, self.config.patch)
        z_parts = [
            temperature * rng.standard_normal((n, *shape)) for shape in shapes[:-1]
        ]
        eps = rng.standard_normal((n, *shapes[-1]))
        z_k = mu + temperature * sigma * eps
        return self.flow.inverse_np(z_parts, z_k)

    # ---- persistence ----

    def _named_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.parameters()}

    def save(self, path: str, extra_meta: dict | None = None, extra_arrays: dict | None = None) -> None:
        meta = {
            "kind": "cnf",
            "config": asdict(self.config),
            "actnorm_initialized": [a.initialized for a in self.flow.actnorm_layers()],
        }
        if extra_meta:
            meta.update(extra_meta)
        arrays = self._named_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: str) -> tuple["CnfModel", dict, dict[str, np.ndarray]]:
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "cnf":
            raise ValueError(f"{path}: not a flow-model checkpoint (kind={meta.get('kind')!r})")
        model = cls(CnfConfig(**meta["config"]))
        for name, p in model.parameters():
            p.value = arrays.pop(name).astype(p.value.dtype, copy=False)
        for act, flag in zip(model.flow.actnorm_layers(), meta["actnorm_initialized"]):
            act.initialized = bool(flag)
        return model, meta, arrays


def _batch_indices(seed: int, it: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, it]))
    return rng.integers(0, n, size=batch)


def train_cnf(
    xs: np.ndarray,
    ys: np.ndarray,
    config: CnfConfig,
    out_dir: str,
    resume: bool = False,
    checkpoint_every: int = 500,
    limit: int | None = None,
    log_cb=None,
) -> str:
    """Run the training loop; returns the checkpoint path.

    Batches are drawn from a per-iteration seeded stream, so stopping at any
    checkpoint and resuming reproduces the one-shot run bit for bit.
    ``limit`` caps the iterations executed in this call (an induced
    interruption); a later ``resume=True`` call picks up from the checkpoint.
    """
    xs = np.asarray(xs, dtype=T.default_dtype())
    ys = np.asarray(ys, dtype=T.default_dtype())
    if xs.ndim == 3:
        xs = xs[:, None]
    if ys.ndim == 3:
        ys = ys[:, None]
    if xs.shape != ys.shape or xs.shape[0] == 0:
        raise ValueError(f"cnf: need matching nonempty patch/mask stacks, got {xs.shape} and {ys.shape}")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "train_log.jsonl")

    start = 0
    if resume and os.path.exists(os.path.join(ckpt_dir, "manifest.json")):
        model, meta, extra = CnfModel.load(ckpt_dir)
        if meta["config"] != asdict(config):
            raise ValueError("cnf: resume config does not match checkpoint config")
        opt = Adam(model.parameters())
        opt.load_state_dict(
            {
                "t": meta["opt_t"],
                "m": {name: extra[f"opt.m.{name}"] for name, _ in model.parameters()},
                "v": {name: extra[f"opt.v.{name}"] for name, _ in model.parameters()},
            }
        )
        start = meta["iter"] + 1
    else:
        model = CnfModel(config)
        opt = Adam(model.parameters())

    n = xs.shape[0]
    mode = "a" if start else "w"
    ran = 0
    with open(log_path, mode) as log:
        for it in range(start, config.iterations):
            if limit is not None and ran >= limit:
                break
            idx = _batch_indices(config.seed, it, n, config.batch)
            record = model.train_step(opt, xs[idx], ys[idx], it)
            log.write(json.dumps(record) + "\n")
            if log_cb is not None:
                log_cb(record)
            ran += 1
            last = it == config.iterations - 1 or (limit is not None and ran >= limit)
            if (it + 1) % checkpoint_every == 0 or last:
                _save_with_opt(model, opt, ckpt_dir, it)
    if config.iterations == 0 or (start >= config.iterations and not os.path.exists(os.path.join(ckpt_dir, MANIFEST_NAME))):
        _save_with_opt(model, opt, ckpt_dir, start - 1)
    return ckpt_dir


def _save_with_opt(model: CnfModel, opt: Adam, ckpt_dir: str, it: int) -> None:
    state = opt.state_dict()
    extra_arrays = {}
    for name, p in model.parameters():
        extra_arrays[f"opt.m.{name}"] = state["m"].get(name, np.zeros_like(p.value))
        extra_arrays[f"opt.v.{name}"] = state["v"].get(name, np.zeros_like(p.value))
    model.save(ckpt_dir, extra_meta={"iter": it, "opt_t": state["t"]}, extra_arrays=extra_arrays)
