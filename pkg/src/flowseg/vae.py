"""Dense variational autoencoder over flattened binary masks.

The encoder is four stacked dense layers whose final stage is the pair of
(mu, logvar) heads; the decoder is five stacked dense layers ending in
per-pixel logits.  Inputs are flattened to vectors on the way in and the
decoded logits are reshaped back to the 2-D mask shape on the way out.

Training minimizes the negative evidence lower bound

    loss = recon + kl

with recon the summed Bernoulli cross entropy of the reconstruction and
kl the closed-form divergence between the diagonal-Gaussian posterior and
the standard-normal prior, 0.5 * sum(e^logvar + mu^2 - 1 - logvar).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

import flowseg.tensor as T
from flowseg.ckpt import MANIFEST as MANIFEST_NAME
from flowseg.ckpt import load_checkpoint, save_checkpoint
from flowseg.tensor import Adam, ShapeError, Var, poly_decay_lr


def kl_standard_normal(mu: np.ndarray, logvar: np.ndarray):
    """Closed-form KL(N(mu, diag e^logvar) || N(0, I)).

    Sums over the trailing (latent) axis; a 1-D input yields a scalar,
    a (batch, latent) input yields one value per row.  Nonnegative, and
    zero exactly when mu = 0 and logvar = 0.
    """
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl: mu shape {mu.shape} != logvar shape {logvar.shape}")
    return 0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar, axis=-1)


def _check_binary(y: np.ndarray, what: str) -> None:
    bad = (y != 0.0) & (y != 1.0)
    if bad.any():
        raise ValueError(f"{what}: mask must be binary, found value {y[bad].flat[0]!r}")


@dataclass
class VaeConfig:
    patch: int = 16
    latent: int = 16
    enc_widths: tuple = (128, 64, 32)
    dec_widths: tuple = (32, 32, 64, 128)
    batch: int = 32
    lr0: float = 1e-3
    warmup: int = 100
    iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.enc_widths) != 3:
            raise ValueError("vae: encoder takes 3 trunk widths (4 layers with the heads)")
        if len(self.dec_widths) != 4:
            raise ValueError("vae: decoder takes 4 trunk widths (5 layers with the output)")
        if self.patch < 1 or self.latent < 1:
            raise ValueError("vae: patch and latent dims must be positive")


def vae_preset(name: str, **overrides) -> VaeConfig:
    if name == "desk":
        cfg = VaeConfig()
    elif name == "paper":
        cfg = VaeConfig(
            patch=64,
            latent=64,
            enc_widths=(4096, 1024, 256),
            dec_widths=(256, 256, 1024, 4096),
            batch=300,
            lr0=1e-3,
            warmup=6_500,
            iterations=65_600,
        )
    else:
        raise ValueError(f"vae: unknown preset {name!r}")
    for k, v in overrides.items():
        if not hasattr(cfg, k):
            raise ValueError(f"vae: unknown config field {k!r}")
        setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


class VaeModel:
    """Dense VAE over patch-sized binary masks."""

    def __init__(self, config: VaeConfig):
        self.config = config
        d = config.patch * config.patch
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7AE]))
        self.params: list[tuple[str, Var]] = []

        def dense_pair(name, n_in, n_out, zero=False):
            if zero:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))
            wv = Var(w, name=f"{name}.w")
            bv = Var(np.zeros(n_out), name=f"{name}.b")
            self.params += [(wv.name, wv), (bv.name, bv)]
            return wv, bv

        widths = [d, *config.enc_widths]
        self.enc_layers = [
            dense_pair(f"enc{i}", widths[i], widths[i + 1]) for i in range(3)
        ]
        # zero-initialized heads: the posterior starts exactly at the prior
        self.mu_head = dense_pair("mu", widths[-1], config.latent, zero=True)
        self.logvar_head = dense_pair("logvar", widths[-1], config.latent, zero=True)

        dwidths = [config.latent, *config.dec_widths, d]
        self.dec_layers = [
            dense_pair(f"dec{i}", dwidths[i], dwidths[i + 1]) for i in range(5)
        ]

    def parameters(self) -> list[tuple[str, Var]]:
        return list(self.params)

    def _flatten_mask(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        p = self.config.patch
        if y.ndim == 2:
            y = y[None]
        if y.ndim == 4 and y.shape[1] == 1:
            y = y[:, 0]
        if y.ndim != 3 or y.shape[1:] != (p, p):
            raise ShapeError(f"vae: expected masks of shape (n, {p}, {p}), got {y.shape}")
        return y.reshape(y.shape[0], p * p)

    def encode(self, y) -> tuple[Var, Var]:
        """Map masks to the posterior parameters (mu, logvar)."""
        h = Var(self._flatten_mask(y))
        for w, b in self.enc_layers:
            h = T.relu(T.dense(h, w, b))
        mu = T.dense(h, *self.mu_head)
        logvar = T.dense(h, *self.logvar_head)
        return mu, logvar

    def encode_np(self, y) -> tuple[np.ndarray, np.ndarray]:
        mu, logvar = self.encode(y)
        return mu.value.copy(), logvar.value.copy()

    def reparameterize(self, mu: Var, logvar: Var, seed: int) -> Var:
        """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I).

        The noise is a constant of the graph, so gradients flow to mu and
        logvar only.
        """
        if mu.shape != logvar.shape:
            raise ShapeError(f"vae: mu shape {mu.shape} != logvar shape {logvar.shape}")
        eps = np.random.default_rng(np.random.SeedSequence([seed, 0xE95])).standard_normal(mu.shape)
        return mu + T.exp(logvar * 0.5) * Var(eps)

    def decode(self, z) -> Var:
        """Latent vectors to flat mask logits of shape (n, patch*patch)."""
        h = T.as_var(z)
        if h.shape[-1] != self.config.latent:
            raise ShapeError(
                f"vae: expected latent dim {self.config.latent}, got {h.shape[-1]}"
            )
        if len(h.shape) == 1:
            h = T.reshape(h, (1, self.config.latent))
        for i, (w, b) in enumerate(self.dec_layers):
            h = T.dense(h, w, b)
            if i < len(self.dec_layers) - 1:
                h = T.relu(h)
        return h

    def decode_np(self, z) -> np.ndarray:
        return self.decode(np.asarray(z, dtype=float)).value.copy()

    def elbo_loss(self, y, seed: int) -> tuple[Var, float, float]:
        """Negative ELBO of a batch: (loss, recon, kl), batch means.

        recon is the per-sample pixel-summed Bernoulli cross entropy of the
        reconstruction; kl the closed-form divergence from the prior.
        """
        flat = self._flatten_mask(y)
        _check_binary(flat, "vae")
        mu, logvar = self.encode(flat.reshape(flat.shape[0], self.config.patch, self.config.patch))
        z = self.reparameterize(mu, logvar, seed)
        logits = self.decode(z)
        target = Var(flat)
        # stable pointwise BCE: softplus(l) - y*l, summed over pixels
        bce = T.sum(T.softplus(logits) - target * logits, axis=1)
        kl = T.sum(T.exp(logvar) + mu * mu + logvar * (-1.0), axis=1) * 0.5 + Var(
            np.full(flat.shape[0], -0.5 * self.config.latent)
        )
        loss = T.mean(bce + kl)
        return loss, float(np.mean(bce.value)), float(np.mean(kl.value))

    def loss_np(self, y, seed: int) -> float:
        """Tape-free value of elbo_loss, for finite-difference probes."""
        loss, _, _ = self.elbo_loss(y, seed)
        return float(loss.value)

    def train_step(self, opt: Adam, y, it: int) -> dict:
        cfg = self.config
        lr = poly_decay_lr(it, cfg.iterations, cfg.lr0, cfg.warmup)
        loss, recon, kl = self.elbo_loss(y, seed=_step_seed(cfg.seed, it))
        if not np.isfinite(loss.value):
            raise ValueError(f"vae: non-finite loss at iteration {it}")
        opt.zero_grad()
        T.backward(loss)
        opt.step(lr)
        return {
            "iter": it,
            "loss": float(loss.value),
            "recon": recon,
            "kl": kl,
            "lr": lr,
        }

    def sample(self, count: int, seed: int) -> np.ndarray:
        """Draw binary masks: decode prior samples, threshold at 1/2.

        sigmoid(logit) >= 0.5 iff logit >= 0, so the binarization depends
        only on the sign of the logits.  Deterministic given the seed.
        """
        if count < 0:
            raise ValueError("vae: count must be nonnegative")
        p = self.config.patch
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A11]))
        z = rng.standard_normal((count, self.config.latent))
        if count == 0:
            return np.zeros((0, p, p))
        logits = self.decode_np(z)
        return (logits >= 0.0).astype(float).reshape(count, p, p)

    def save(self, path: str, extra_meta: dict | None = None, extra_arrays: dict | None = None) -> None:
        meta = {"kind": "vae", "config": asdict(self.config)}
        if extra_meta:
            meta.update(extra_meta)
        arrays = {name: p.value for name, p in self.params}
        if extra_arrays:
            arrays.update(extra_arrays)
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path: str) -> tuple["VaeModel", dict, dict]:
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "vae":
            raise ValueError(f"vae: checkpoint at {path} has kind {meta.get('kind')!r}")
        cfg = dict(meta["config"])
        cfg["enc_widths"] = tuple(cfg["enc_widths"])
        cfg["dec_widths"] = tuple(cfg["dec_widths"])
        model = cls(VaeConfig(**cfg))
        for name, p in model.params:
            if name not in arrays:
                raise ValueError(f"vae: checkpoint missing array {name!r}")
            if arrays[name].shape != p.value.shape:
                raise ShapeError(
                    f"vae: checkpoint array {name!r} has shape {arrays[name].shape}, "
                    f"expected {p.value.shape}"
                )
            p.value = arrays[name].astype(p.value.dtype)
        leftover = {k: v for k, v in arrays.items() if k not in dict(model.params)}
        return model, meta, leftover


def _step_seed(seed: int, it: int) -> int:
    # distinct reparameterization stream per iteration, reproducible on resume
    return int(np.random.SeedSequence([seed, it]).generate_state(1)[0])


def _batch_indices(seed: int, it: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, it]))
    return rng.integers(0, n, size=batch)


def train_vae(
    masks: np.ndarray,
    config: VaeConfig,
    out_dir: str,
    resume: bool = False,
    checkpoint_every: int = 500,
    limit: int | None = None,
    log_cb=None,
) -> str:
    """Train on a stack of (n, patch, patch) binary masks; returns the
    checkpoint directory.  Appends line-delimited JSON records to
    out_dir/train_log.jsonl.  With resume=True continues bit-exactly from
    the saved optimizer state."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "train_log.jsonl")
    masks = np.asarray(masks, dtype=float)
    if masks.ndim == 4 and masks.shape[1] == 1:
        masks = masks[:, 0]
    if masks.ndim != 3:
        raise ShapeError(f"vae: expected (n, h, w) masks, got {masks.shape}")
    n = masks.shape[0]
    if n == 0:
        raise ValueError("vae: empty training set")

    start = 0
    if resume and os.path.exists(os.path.join(ckpt_dir, MANIFEST_NAME)):
        model, meta, extra = VaeModel.load(ckpt_dir)
        if asdict(model.config) != asdict(config):
            raise ValueError("vae: resume config does not match checkpoint config")
        opt = Adam(model.parameters())
        state = {"t": meta.get("opt_t", 0), "m": {}, "v": {}}
        for name, p in model.parameters():
            state["m"][name] = extra.get(f"opt.m.{name}", np.zeros_like(p.value))
            state["v"][name] = extra.get(f"opt.v.{name}", np.zeros_like(p.value))
        opt.load_state_dict(state)
        start = meta["iter"] + 1
    else:
        model = VaeModel(config)
        opt = Adam(model.parameters())

    mode = "a" if resume and os.path.exists(log_path) else "w"
    ran = 0
    with open(log_path, mode) as log:
        for it in range(start, config.iterations):
            idx = _batch_indices(config.seed, it, n, config.batch)
            rec = model.train_step(opt, masks[idx], it)
            log.write(json.dumps(rec) + "\n")
            if log_cb is not None:
                log_cb(rec)
            ran += 1
            last = it == config.iterations - 1 or (limit is not None and ran >= limit)
            if (it + 1) % checkpoint_every == 0 or last:
                _save_with_opt(model, opt, ckpt_dir, it)
            if limit is not None and ran >= limit:
                break
    if config.iterations == 0 or (
        start >= config.iterations and not os.path.exists(os.path.join(ckpt_dir, MANIFEST_NAME))
    ):
        _save_with_opt(model, opt, ckpt_dir, start - 1)
    return ckpt_dir


def _save_with_opt(model: VaeModel, opt: Adam, ckpt_dir: str, it: int) -> None:
    state = opt.state_dict()
    extra = {}
    for name, p in model.parameters():
        extra[f"opt.m.{name}"] = state["m"].get(name, np.zeros_like(p.value))
        extra[f"opt.v.{name}"] = state["v"].get(name, np.zeros_like(p.value))
    model.save(ckpt_dir, extra_meta={"iter": it, "opt_t": state["t"]}, extra_arrays=extra)
