"""Invertible layers and their multi-scale composition.

Every layer exposes three routes: ``forward`` on tape ``Var``s for training,
``forward_np``/``inverse_np`` on plain arrays for initialization and sampling.
Forward returns ``(y, logdet)`` where logdet broadcasts against a per-sample
vector; inverse routes are exact up to float round-off.

Layer order inside a step block is actnorm, then the invertible 1x1
convolution, then the affine coupling.  The multi-scale composition squeezes
before each level and factors out the first half of the channels after every
level except the last.
"""

from __future__ import annotations

import numpy as np

import flowseg.tensor as T
from flowseg.tensor import ShapeError, Var


def xavier_normal(rng: np.random.Generator, shape) -> np.ndarray:
    """Xavier-normal init; fan counts include the receptive field for convs."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def squeeze_np(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze: spatial dims must be even, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2)
    return y.transpose(0, 1, 3, 5, 2, 4).reshape(n, 4 * c, h // 2, w // 2)


def unsqueeze_np(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze: channel count must be divisible by 4, got {c4}")
    c = c4 // 4
    x = y.reshape(n, c, 2, 2, h, w)
    return x.transpose(0, 1, 4, 2, 5, 3).reshape(n, c, 2 * h, 2 * w)


def squeeze(x: Var) -> Var:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze: spatial dims must be even, got {h}x{w}")
    y = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (n, 4 * c, h // 2, w // 2))


def split_np(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = h.shape[1]
    if c % 2:
        raise ShapeError(f"split: channel count must be even, got {c}")
    return h[:, : c // 2], h[:, c // 2 :]


def merge_np(z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.concatenate([z, h], axis=1)


def split(h: Var) -> tuple[Var, Var]:
    """Factor out the first half of the channels (documented convention)."""
    c = h.shape[1]
    if c % 2:
        raise ShapeError(f"split: channel count must be even, got {c}")
    return h[:, : c // 2], h[:, c // 2 :]


class ActNorm:
    """Per-channel affine layer with data-dependent initialization.

    The scale is stored in log space, so it stays positive and its log
    contributes directly to the determinant term.
    """

    def __init__(self, channels: int, name: str = "act"):
        self.channels = channels
        self.name = name
        self.log_scale = Var(np.zeros(channels), name=f"{name}.log_scale")
        self.bias = Var(np.zeros(channels), name=f"{name}.bias")
        self.initialized = False

    def initialize(self, batch: np.ndarray) -> None:
        if self.initialized:
            raise RuntimeError(f"{self.name}: already initialized")
        n, c, h, w = batch.shape
        if n * h * w < 2:
            raise ValueError(f"{self.name}: need at least 2 elements per channel to initialize")
        mean = batch.mean(axis=(0, 2, 3))
        std = batch.std(axis=(0, 2, 3))
        bad = np.flatnonzero(std < 1e-12)
        if bad.size:
            raise ValueError(f"{self.name}: zero variance in channel {int(bad[0])}")
        self.log_scale.value = -np.log(std)
        self.bias.value = -mean / std
        self.initialized = True

    def initialize_identity(self) -> None:
        self.log_scale.value = np.zeros(self.channels)
        self.bias.value = np.zeros(self.channels)
        self.initialized = True

    def _require_init(self):
        if not self.initialized:
            raise RuntimeError(f"{self.name}: used before initialization")

    def forward(self, x: Var) -> tuple[Var, Var]:
        self._require_init()
        c = self.channels
        h, w = x.shape[2], x.shape[3]
        scale = T.reshape(T.exp(self.log_scale), (1, c, 1, 1))
        bias = T.reshape(self.bias, (1, c, 1, 1))
        y = x * scale + bias
        logdet = T.sum(self.log_scale) * float(h * w)
        return y, logdet

    def forward_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self._require_init()
        c = self.channels
        h, w = x.shape[2], x.shape[3]
        y = x * np.exp(self.log_scale.value).reshape(1, c, 1, 1) + self.bias.value.reshape(1, c, 1, 1)
        return y, np.asarray(float(h * w) * self.log_scale.value.sum())

    def inverse_np(self, y: np.ndarray) -> np.ndarray:
        self._require_init()
        c = self.channels
        return (y - self.bias.value.reshape(1, c, 1, 1)) * np.exp(-self.log_scale.value).reshape(1, c, 1, 1)

    def parameters(self):
        return [(self.log_scale.name, self.log_scale), (self.bias.name, self.bias)]


class Invertible1x1Conv:
    """Pixel-wise multiplication by a learned invertible C x C matrix.

    Default init is the identity so a fresh flow is the plain squeeze/split
    permutation; ``init="rotation"`` draws a random orthogonal matrix instead.
    """

    def __init__(self, channels: int, init: str = "identity", rng: np.random.Generator | None = None, name: str = "inv"):
        self.channels = channels
        self.name = name
        if init == "identity":
            w = np.eye(channels)
        elif init == "rotation":
            if rng is None:
                raise ValueError(f"{name}: rotation init needs a random generator")
            q, r = np.linalg.qr(rng.normal(size=(channels, channels)))
            w = q * np.sign(np.diag(r))
        else:
            raise ValueError(f"{name}: unknown init {init!r}")
        self.w = Var(w, name=f"{name}.w")

    def forward(self, x: Var) -> tuple[Var, Var]:
        c = self.channels
        h, w = x.shape[2], x.shape[3]
        kernel = T.reshape(self.w, (c, c, 1, 1))
        y = T.conv2d(x, kernel)
        logdet = T.slogdet(self.w) * float(h * w)
        return y, logdet

    def _slogdet_np(self) -> float:
        sign, ld = np.linalg.slogdet(self.w.value)
        if sign == 0 or not np.isfinite(ld) or ld < np.log(1e-12):
            raise ValueError(f"{self.name}: weight matrix is singular (log|det| = {ld})")
        return float(ld)

    def forward_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h, w = x.shape[2], x.shape[3]
        ld = self._slogdet_np()
        y = np.einsum("oc,nchw->nohw", self.w.value, x)
        return y, np.asarray(float(h * w) * ld)

    def inverse_np(self, y: np.ndarray) -> np.ndarray:
        self._slogdet_np()
        n, c, h, w = y.shape
        x = np.linalg.solve(self.w.value, y.reshape(n, c, h * w))
        return x.reshape(n, c, h, w)

    def parameters(self):
        return [(self.w.name, self.w)]


class AffineCoupling:
    """Scale-and-shift of the second channel half by a 3-conv backbone.

    Backbone: 3x3 -> 1x1 -> 3x3 with ReLU between, final conv zero-initialized
    so the layer starts as the identity.  Output channels split into s (first
    half) and t (second half); logdet sums s per sample.
    """

    def __init__(self, channels: int, hidden: int = 64, rng: np.random.Generator | None = None, name: str = "coup"):
        if channels % 2:
            raise ShapeError(f"{name}: coupling needs an even channel count, got {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.hidden = hidden
        self.name = name
        d = channels // 2
        self.w1 = Var(xavier_normal(rng, (hidden, d, 3, 3)), name=f"{name}.w1")
        self.b1 = Var(np.zeros(hidden), name=f"{name}.b1")
        self.w2 = Var(xavier_normal(rng, (hidden, hidden, 1, 1)), name=f"{name}.w2")
        self.b2 = Var(np.zeros(hidden), name=f"{name}.b2")
        self.w3 = Var(np.zeros((channels, hidden, 3, 3)), name=f"{name}.w3")
        self.b3 = Var(np.zeros(channels), name=f"{name}.b3")

    def _backbone(self, x1: Var) -> tuple[Var, Var]:
        d = self.channels // 2
        h = T.relu(T.conv2d(x1, self.w1, self.b1, padding=1))
        h = T.relu(T.conv2d(h, self.w2, self.b2, padding=0))
        out = T.conv2d(h, self.w3, self.b3, padding=1)
        return out[:, :d], out[:, d:]

    def _backbone_np(self, x1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        from flowseg.tensor.conv import conv2d_np

        d = self.channels // 2
        h = np.maximum(conv2d_np(x1, self.w1.value, self.b1.value, 1, 1), 0.0)
        h = np.maximum(conv2d_np(h, self.w2.value, self.b2.value, 1, 0), 0.0)
        out = conv2d_np(h, self.w3.value, self.b3.value, 1, 1)
        return out[:, :d], out[:, d:]

    def forward(self, x: Var) -> tuple[Var, Var]:
        d = self.channels // 2
        x1, x2 = x[:, :d], x[:, d:]
        s, t = self._backbone(x1)
        y2 = x2 * T.exp(s) + t
        y = T.concat([x1, y2], axis=1)
        logdet = T.sum(s, axis=(1, 2, 3))
        return y, logdet

    def forward_np(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.channels // 2
        x1, x2 = x[:, :d], x[:, d:]
        s, t = self._backbone_np(x1)
        y = np.concatenate([x1, x2 * np.exp(s) + t], axis=1)
        return y, s.sum(axis=(1, 2, 3))

    def inverse_np(self, y: np.ndarray) -> np.ndarray:
        d = self.channels // 2
        y1, y2 = y[:, :d], y[:, d:]
        s, t = self._backbone_np(y1)
        return np.concatenate([y1, (y2 - t) * np.exp(-s)], axis=1)

    def parameters(self):
        return [(v.name, v) for v in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)]


class MultiScaleFlow:
    """L levels of squeeze + K step blocks, factoring out half the channels
    between levels.  ``forward`` returns the factored-out parts, the final
    latent, and the per-sample total log-determinant."""

    def __init__(
        self,
        levels: int = 2,
        depth: int = 4,
        in_channels: int = 1,
        hidden: int = 64,
        invconv_init: str = "identity",
        seed: int = 0,
    ):
        if levels < 1 or depth < 1:
            raise ValueError(f"flow: levels and depth must be >= 1, got {levels}, {depth}")
        self.levels = levels
        self.depth = depth
        self.in_channels = in_channels
        self.hidden = hidden
        self.invconv_init = invconv_init
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF10]))
        self.blocks: list[list[tuple[ActNorm, Invertible1x1Conv, AffineCoupling]]] = []
        c = in_channels
        for li in range(levels):
            c *= 4
            steps = []
            for ki in range(depth):
                tag = f"L{li}.K{ki}"
                steps.append(
                    (
                        ActNorm(c, name=f"{tag}.act"),
                        Invertible1x1Conv(c, init=invconv_init, rng=rng, name=f"{tag}.inv"),
                        AffineCoupling(c, hidden=hidden, rng=rng, name=f"{tag}.coup"),
                    )
                )
            self.blocks.append(steps)
            if li < levels - 1:
                c //= 2

    def describe(self) -> dict:
        return {
            "levels": self.levels,
            "depth": self.depth,
            "in_channels": self.in_channels,
            "hidden": self.hidden,
            "invconv_init": self.invconv_init,
            "seed": self.seed,
        }

    def _check_dims(self, c: int, h: int, w: int) -> None:
        need = 2**self.levels
        if c != self.in_channels:
            raise ShapeError(f"flow: expected {self.in_channels} input channels, got {c}")
        if h % need or w % need:
            raise ShapeError(f"flow: spatial dims {h}x{w} must be divisible by 2^levels = {need}")

    def z_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """Shapes of the factored-out parts followed by the final latent."""
        self._check_dims(self.in_channels, height, width)
        shapes = []
        c, h, w = self.in_channels, height, width
        for li in range(self.levels):
            c, h, w = 4 * c, h // 2, w // 2
            if li < self.levels - 1:
                shapes.append((c // 2, h, w))
                c //= 2
        shapes.append((c, h, w))
        return shapes

    def forward(self, x, init_actnorm: bool = False) -> tuple[list[Var], Var, Var]:
        x = T.as_var(x)
        n, c, h, w = x.shape
        self._check_dims(c, h, w)
        total = Var(np.zeros(n, dtype=x.dtype))
        z_parts: list[Var] = []
        cur = x
        for li, steps in enumerate(self.blocks):
            cur = squeeze(cur)
            for act, inv, coup in steps:
                if not act.initialized:
                    if not init_actnorm:
                        raise RuntimeError(f"flow: {act.name} not initialized; run an init batch first")
                    act.initialize(cur.value)
                cur, ld = act.forward(cur)
                total = total + ld
                cur, ld = inv.forward(cur)
                total = total + ld
                cur, ld = coup.forward(cur)
                total = total + ld
            if li < self.levels - 1:
                z, cur = split(cur)
                z_parts.append(z)
        return z_parts, cur, total

    def forward_np(self, x: np.ndarray, init_actnorm: bool = False):
        n, c, h, w = x.shape
        self._check_dims(c, h, w)
        total = np.zeros(n, dtype=x.dtype)
        z_parts: list[np.ndarray] = []
        cur = x
        for li, steps in enumerate(self.blocks):
            cur = squeeze_np(cur)
            for act, inv, coup in steps:
                if not act.initialized:
                    if not init_actnorm:
                        raise RuntimeError(f"flow: {act.name} not initialized; run an init batch first")
                    act.initialize(cur)
                cur, ld = act.forward_np(cur)
                total = total + ld
                cur, ld = inv.forward_np(cur)
                total = total + ld
                cur, ld = coup.forward_np(cur)
                total = total + ld
            if li < self.levels - 1:
                z, cur = split_np(cur)
                z_parts.append(z)
        return z_parts, cur, total

    def inverse_np(self, z_parts: list[np.ndarray], z_k: np.ndarray) -> np.ndarray:
        cur = z_k
        for li in reversed(range(self.levels)):
            if li < self.levels - 1:
                cur = merge_np(z_parts[li], cur)
            for act, inv, coup in reversed(self.blocks[li]):
                cur = coup.inverse_np(cur)
                cur = inv.inverse_np(cur)
                cur = act.inverse_np(cur)
            cur = unsqueeze_np(cur)
        return cur

    def permutation_np(self, x: np.ndarray):
        """The squeeze/split rearrangement alone, with every layer skipped."""
        z_parts = []
        cur = x
        for li in range(self.levels):
            cur = squeeze_np(cur)
            if li < self.levels - 1:
                z, cur = split_np(cur)
                z_parts.append(z)
        return z_parts, cur

    def initialize_identity(self) -> None:
        for steps in self.blocks:
            for act, _, _ in steps:
                act.initialize_identity()

    def randomize(self, rng: np.random.Generator, scale: float = 0.1) -> None:
        """Draw non-identity couplings and channel mixings.

        Actnorm layers are reset to initialize from the next forward batch
        (pass ``init_actnorm=True``): re-standardizing after each random layer
        keeps activations bounded, so unbounded exp(s) factors cannot compound
        across blocks for unlucky draws.
        """
        for steps in self.blocks:
            for act, inv, coup in steps:
                act.initialized = False
                q, r = np.linalg.qr(rng.normal(size=(inv.channels, inv.channels)))
                q = q * np.sign(np.diag(r))
                inv.w.value = q @ np.diag(np.exp(rng.normal(0.0, scale, size=inv.channels)))
                coup.w3.value = rng.normal(0.0, scale, size=coup.w3.value.shape)
                coup.b3.value = rng.normal(0.0, scale, size=coup.b3.value.shape)

    def parameters(self):
        out = []
        for steps in self.blocks:
            for act, inv, coup in steps:
                out.extend(act.parameters())
                out.extend(inv.parameters())
                out.extend(coup.parameters())
        return out

    def actnorm_layers(self) -> list[ActNorm]:
        return [act for steps in self.blocks for act, _, _ in steps]
