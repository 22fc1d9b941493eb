"""Input encoders mapping a static image batch to a [T, B, C, H, W] sequence.

Trainable encoders (``direct``, ``gac``) share a {Conv-BN} stem whose output
is repeated over T steps.  Direct coding spikes it through a LIF layer; gated
attention coding (GAC) multiplies those spikes by a sigmoid gate built from a
temporal attention vector and a spatial-channel attention map.  ``rate``,
``phase`` and ``ttfs`` are fixed, parameter-free encoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neuron import LifConfig, LifTape, lif_backward, lif_sequence
from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dense,
    dense_backward,
    global_pool,
    global_pool_backward,
    he_normal,
    relu,
    relu_backward,
    same_padding,
    sigmoid,
)

SCHEMES = ("direct", "gac", "rate", "phase", "ttfs")
TRAINABLE = ("direct", "gac")


class EncoderConfigError(ValueError):
    pass


def default_reduction(steps: int) -> int:
    return 1 if steps < 4 else 2


@dataclass
class GauParams:
    w_m: np.ndarray  # [T, T/r]
    w_n: np.ndarray  # [T/r, T]
    sca: ConvParams  # [C, C, K, K], same padding

    def __post_init__(self):
        self.w_m = np.ascontiguousarray(self.w_m, dtype=np.float64)
        self.w_n = np.ascontiguousarray(self.w_n, dtype=np.float64)
        steps, hidden = self.w_m.shape
        if self.w_n.shape != (hidden, steps):
            raise EncoderConfigError(f"w_n shape {self.w_n.shape} inconsistent with w_m {self.w_m.shape}")
        if hidden < 1 or steps % hidden:
            raise EncoderConfigError(f"reduction factor must divide T={steps} (hidden size {hidden})")
        k = self.sca.kernel
        if k.shape[0] != k.shape[1]:
            raise EncoderConfigError("spatial-channel kernel must map C channels to C channels")

    @property
    def steps(self) -> int:
        return self.w_m.shape[0]

    @property
    def r(self) -> int:
        return self.w_m.shape[0] // self.w_m.shape[1]

    @classmethod
    def init(cls, rng, steps: int, channels: int, r: int | None = None, K: int = 4) -> "GauParams":
        r = default_reduction(steps) if r is None else r
        if r < 1 or steps % r:
            raise EncoderConfigError(f"r={r} does not divide T={steps}")
        hidden = steps // r
        kernel = he_normal(rng, (channels, channels, K, K))
        return cls(
            w_m=he_normal(rng, (steps, hidden)),
            w_n=he_normal(rng, (hidden, steps)),
            sca=ConvParams(kernel, padding=same_padding(K)),
        )


@dataclass
class EncoderSpec:
    scheme: str
    T: int
    conv: ConvParams | None = None
    bn: BatchNormParams | None = None
    gau: GauParams | None = None
    lif: LifConfig = field(default_factory=LifConfig)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise EncoderConfigError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.T < 1:
            raise EncoderConfigError("T must be a positive integer")
        stem = self.scheme in TRAINABLE
        if stem != (self.conv is not None) or stem != (self.bn is not None):
            raise EncoderConfigError(f"{self.scheme}: conv/bn stem must be present iff scheme is direct or gac")
        if (self.scheme == "gac") != (self.gau is not None):
            raise EncoderConfigError("gau parameters must be present iff scheme is gac")
        if self.gau is not None and self.gau.steps != self.T:
            raise EncoderConfigError(f"gau built for T={self.gau.steps}, encoder has T={self.T}")
        if stem and self.conv.kernel.shape[0] != self.bn.gamma.shape[0]:
            raise EncoderConfigError("stem conv and bn channel counts differ")

    @property
    def out_channels(self) -> int | None:
        return self.conv.kernel.shape[0] if self.conv is not None else None


@dataclass
class EncodedSequence:
    data: np.ndarray  # [T, B, C, H, W]
    binary: bool
    weights_per_step: np.ndarray | None = None
    tape: object = field(default=None, repr=False, compare=False)


def make_encoder(
    scheme: str,
    steps: int,
    in_channels: int,
    channels: int = 16,
    rng=None,
    kernel: int = 3,
    K: int = 4,
    r: int | None = None,
    lif: LifConfig | None = None,
) -> EncoderSpec:
    """Build an :class:`EncoderSpec` with freshly initialised parameters."""
    lif = lif or LifConfig()
    if scheme not in TRAINABLE:
        return EncoderSpec(scheme, steps, lif=lif)
    rng = np.random.default_rng(0) if rng is None else rng
    conv = ConvParams(he_normal(rng, (channels, in_channels, kernel, kernel)), padding=same_padding(kernel))
    bn = BatchNormParams.identity(channels)
    gau = GauParams.init(rng, steps, channels, r=r, K=K) if scheme == "gac" else None
    return EncoderSpec(scheme, steps, conv, bn, gau, lif)


def identity_stem(scheme: str, steps: int, channels: int = 1, gau: GauParams | None = None,
                  lif: LifConfig | None = None) -> EncoderSpec:
    """Stem that passes images through unchanged (1x1 unit conv, eval-mode BN)."""
    kernel = np.zeros((channels, channels, 1, 1))
    kernel[np.arange(channels), np.arange(channels)] = 1.0
    eps = 1e-5
    bn = BatchNormParams.identity(channels, eps=eps, mode="eval")
    bn.running_var[:] = 1.0 - eps  # var + eps == 1.0 exactly
    return EncoderSpec(scheme, steps, ConvParams(kernel), bn, gau, lif or LifConfig())


# -- stem ---------------------------------------------------------------------

def _stem(images, spec: EncoderSpec):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"images must be [B,C,H,W], got {images.shape}")
    pre = conv2d(images, spec.conv)
    return pre, batchnorm(pre, spec.bn)


def stem_output(images, spec: EncoderSpec) -> np.ndarray:
    """BN(Conv(images)) for a direct or gac encoder, before repetition over T."""
    if spec.scheme not in TRAINABLE:
        raise EncoderConfigError(f"{spec.scheme} has no stem")
    return _stem(images, spec)[1]


def _repeat(x, steps):
    return np.broadcast_to(x, (steps,) + x.shape)


@dataclass
class DirectTape:
    images: np.ndarray
    stem_pre: np.ndarray
    lif: LifTape


def encode_direct(images, spec: EncoderSpec) -> EncodedSequence:
    if spec.scheme != "direct":
        raise EncoderConfigError(f"encode_direct called with scheme {spec.scheme!r}")
    pre, stem = _stem(images, spec)
    spikes, tape = lif_sequence(_repeat(stem, spec.T), spec.lif, return_tape=True)
    return EncodedSequence(spikes, True, tape=DirectTape(np.asarray(images, dtype=np.float64), pre, tape))


# -- gated attention unit -----------------------------------------------------

def _check_steps(x, p: GauParams):
    if x.shape[0] != p.steps:
        raise EncoderConfigError(f"input has T={x.shape[0]} but attention weights expect T={p.steps}")


def temporal_attention(x, p: GauParams, return_cache: bool = False):
    """Temporal weight vector m [T, B] from avg- and max-pooled steps.

    The two pooled vectors go through one shared two-layer MLP acting on the
    T axis (weights ``w_n`` then ``w_m``, ReLU between) and are summed.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_steps(x, p)
    m = np.zeros(x.shape[:2])
    cache = []
    for kind in ("avg", "max"):
        v = global_pool(x, kind).T  # [B, T]
        z = dense(v, p.w_n)
        a = relu(z)
        m += dense(a, p.w_m).T
        cache.append((kind, v, z, a))
    return (m, cache) if return_cache else m


def temporal_attention_backward(grad_m, x, p: GauParams, cache=None):
    """Return ``(d_x, d_w_m, d_w_n)``."""
    if cache is None:
        _, cache = temporal_attention(x, p, return_cache=True)
    gm = np.ascontiguousarray(np.asarray(grad_m).T)
    dx = np.zeros(np.shape(x))
    dwm = np.zeros_like(p.w_m)
    dwn = np.zeros_like(p.w_n)
    for kind, v, z, a in cache:
        da, g = dense_backward(gm, a, p.w_m)
        dwm += g
        dv, g = dense_backward(relu_backward(da, z), v, p.w_n)
        dwn += g
        dx += global_pool_backward(dv.T, x, kind)
    return dx, dwm, dwn


def spatial_channel_attention(x, p: GauParams):
    """Apply the shared K x K conv to every time step of ``x`` [T, B, C, H, W]."""
    x = np.asarray(x, dtype=np.float64)
    steps, b = x.shape[:2]
    out = conv2d(x.reshape((steps * b,) + x.shape[2:]), p.sca)
    return out.reshape((steps, b) + out.shape[1:])


def spatial_channel_attention_backward(grad_n, x, p: GauParams):
    """Return ``(d_x, d_kernel)``."""
    x = np.asarray(x, dtype=np.float64)
    steps, b = x.shape[:2]
    flat = (steps * b,) + x.shape[2:]
    g = np.asarray(grad_n).reshape((steps * b,) + np.shape(grad_n)[2:])
    dx, dk = conv2d_backward(g, x.reshape(flat), p.sca)
    return dx.reshape(x.shape), dk


def _expand_m(m, ndim):
    return np.asarray(m).reshape(np.shape(m) + (1,) * (ndim - 2))


def gau_gate(m, n):
    """sigma(m (x) n) with m [T, B] broadcast over the channel/spatial axes of n."""
    n = np.asarray(n, dtype=np.float64)
    return sigmoid(_expand_m(m, n.ndim) * n)


def gau_gate_backward(grad_g, m, n):
    """Return ``(d_m, d_n)``."""
    n = np.asarray(n, dtype=np.float64)
    me = _expand_m(m, n.ndim)
    g = sigmoid(me * n)
    gpre = grad_g * g * (1.0 - g)
    dm = (gpre * n).reshape(np.shape(m) + (-1,)).sum(axis=-1)
    return dm, gpre * me


@dataclass
class GacTape:
    images: np.ndarray
    stem_pre: np.ndarray
    stem: np.ndarray
    ta_cache: list
    m: np.ndarray  # [T, B]
    n: np.ndarray  # [B, C, H, W], identical at every step
    gate: np.ndarray  # [T, B, C, H, W]
    lif: LifTape


def encode_gac(images, spec: EncoderSpec) -> EncodedSequence:
    """O = gate(TA(x), SCA(x)) * LIF(x) with x the stem output repeated T times."""
    if spec.scheme != "gac":
        raise EncoderConfigError(f"encode_gac called with scheme {spec.scheme!r}")
    p = spec.gau
    pre, stem = _stem(images, spec)
    xs = _repeat(stem, spec.T)
    m, ta_cache = temporal_attention(xs, p, return_cache=True)
    # the stem output is the same at every step, so one conv serves all T
    n = conv2d(stem, p.sca)
    gate = gau_gate(m, _repeat(n, spec.T))
    spikes, lif_tape = lif_sequence(xs, spec.lif, return_tape=True)
    tape = GacTape(np.asarray(images, dtype=np.float64), pre, stem, ta_cache, m, n, gate, lif_tape)
    return EncodedSequence(gate * spikes, False, tape=tape)


# -- parameter-free encoders --------------------------------------------------

def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def encode_rate(images, steps: int, seed: int = 0, index_offset: int = 0) -> EncodedSequence:
    """Independent Bernoulli(p = pixel) spikes at each step.

    Sample ``b`` draws from its own stream keyed by ``(seed, index_offset + b)``,
    so results do not depend on how a dataset is split into batches.
    """
    images = np.asarray(images, dtype=np.float64)
    if steps < 1:
        raise ValueError("steps must be positive")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError("rate coding expects pixel values in [0, 1]")
    out = np.empty((steps,) + images.shape)
    for b in range(images.shape[0]):
        draws = _stream(seed, index_offset + b).random((steps,) + images.shape[1:])
        out[:, b] = draws < images[b]
    return EncodedSequence(out, True)


PHASE_BITS = 8


def encode_phase(images8, steps: int) -> EncodedSequence:
    """Weighted-spike phase code: step t carries bit (t mod 8) of the pixel, MSB first.

    ``weights_per_step[t] = 2**-(1 + t mod 8)`` so that summing weighted
    spikes over one 8-step cycle recovers ``pixel / 256``.
    """
    px = np.asarray(images8)
    if steps < 1:
        raise ValueError("steps must be positive")
    if px.size and (np.any(px != np.round(px)) or px.min() < 0 or px.max() > 255):
        raise ValueError("phase coding expects integer pixels in [0, 255]")
    px = px.astype(np.int64)
    phase = np.arange(steps) % PHASE_BITS
    bits = (px[None] >> (PHASE_BITS - 1 - phase).reshape((-1,) + (1,) * px.ndim)) & 1
    weights = 2.0 ** -(1 + phase)
    return EncodedSequence(bits.astype(np.float64), True, weights_per_step=weights)


def ttfs_step(x, steps: int):
    """0-based spike step for intensity ``x``; rounds half up."""
    return np.floor((1.0 - np.asarray(x, dtype=np.float64)) * (steps - 1) + 0.5).astype(np.int64)


def encode_ttfs(images, steps: int) -> EncodedSequence:
    """Single spike per pixel, brighter pixels earlier; zero pixels stay silent."""
    images = np.asarray(images, dtype=np.float64)
    if steps < 1:
        raise ValueError("steps must be positive")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError("ttfs coding expects pixel values in [0, 1]")
    idx = ttfs_step(images, steps)
    out = (np.arange(steps).reshape((-1,) + (1,) * images.ndim) == idx[None]) & (images[None] > 0)
    return EncodedSequence(out.astype(np.float64), True)


def to_uint8(images) -> np.ndarray:
    return np.floor(np.clip(np.asarray(images, dtype=np.float64), 0, 1) * 255 + 0.5)


def encode(images, spec: EncoderSpec, seed: int = 0, index_offset: int = 0) -> EncodedSequence:
    """Dispatch on ``spec.scheme``; ``images`` are [B, C, H, W] in [0, 1]."""
    if spec.scheme == "direct":
        return encode_direct(images, spec)
    if spec.scheme == "gac":
        return encode_gac(images, spec)
    if spec.scheme == "rate":
        return encode_rate(images, spec.T, seed, index_offset)
    if spec.scheme == "phase":
        return encode_phase(to_uint8(images), spec.T)
    return encode_ttfs(images, spec.T)


# -- backward -----------------------------------------------------------------

def encoder_backward(spec: EncoderSpec, tape, upstream) -> dict[str, np.ndarray]:
    """Gradients of the stem (and GAU) parameters given dL/d(output) [T, B, C, H, W].

    Keys: ``conv``, ``bn_gamma``, ``bn_beta`` and, for GAC, ``w_m``, ``w_n``, ``sca``.
    """
    if spec.scheme not in TRAINABLE:
        raise EncoderConfigError(f"scheme {spec.scheme!r} has no trainable parameters")
    if tape is None:
        raise ValueError("missing forward tape; run the encoder first")
    upstream = np.asarray(upstream, dtype=np.float64)
    grads = {}
    if spec.scheme == "direct":
        g_stem = lif_backward(tape.lif, upstream).sum(axis=0)
    else:
        p = spec.gau
        steps = spec.T
        g_gate = upstream * tape.lif.s
        g_spk = upstream * tape.gate
        gpre = g_gate * tape.gate * (1.0 - tape.gate)
        g_m = (gpre * tape.n[None]).reshape(tape.m.shape + (-1,)).sum(axis=-1)
        g_n = (gpre * _expand_m(tape.m, gpre.ndim)).sum(axis=0)
        g_stem_sca, grads["sca"] = conv2d_backward(g_n, tape.stem, p.sca)
        g_x_ta, grads["w_m"], grads["w_n"] = temporal_attention_backward(
            g_m, _repeat(tape.stem, steps), p, tape.ta_cache
        )
        g_x_lif = lif_backward(tape.lif, g_spk)
        g_stem = (g_x_lif + g_x_ta).sum(axis=0) + g_stem_sca
    g_pre, grads["bn_gamma"], grads["bn_beta"] = batchnorm_backward(g_stem, tape.stem_pre, spec.bn)
    _, grads["conv"] = conv2d_backward(g_pre, tape.images, spec.conv, need_input=False)
    return grads
