"""Spike-driven conv networks: membrane-shortcut (MS) residual blocks on top of an encoder.

Every convolution and the classifier inside the architecture sit right after
a LIF layer, so they only ever see binary spikes.  Residual additions happen
on real-valued membrane inputs.  Time is handled layer by layer: a layer sees
the whole [T, B, ...] sequence, the LIF layers iterate over T internally, and
conv/BN layers fold T into the batch axis (so BN statistics pool over T x B).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from .coding import (
    TRAINABLE,
    EncodedSequence,
    EncoderSpec,
    encode,
    encoder_backward,
    make_encoder,
)
from .neuron import LifConfig, lif_backward, lif_sequence
from .tensor import (
    BatchNormParams,
    ConvParams,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    dense,
    dense_backward,
    he_normal,
    same_padding,
)


class NetworkConfigError(ValueError):
    pass


class SpikeDrivenError(AssertionError):
    """A conv/fc layer inside the architecture received a non-binary input."""


def _fold(x):
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def _unfold(x, steps):
    return x.reshape((steps, x.shape[0] // steps) + x.shape[1:])


def _is_binary(x) -> bool:
    return bool(np.all((x == 0) | (x == 1)))


# -- layers -------------------------------------------------------------------

class Conv:
    def __init__(self, params: ConvParams):
        self.p = params
        self.grad = np.zeros_like(params.kernel)
        self._x = None

    def forward(self, x):
        self._x = x
        return conv2d(x, self.p)

    def backward(self, g, need_input=True):
        dx, dk = conv2d_backward(g, self._x, self.p, need_input=need_input)
        self.grad += dk
        return dx


class BatchNorm:
    def __init__(self, params: BatchNormParams):
        self.p = params
        self.grad_gamma = np.zeros_like(params.gamma)
        self.grad_beta = np.zeros_like(params.beta)
        self._x = None

    def forward(self, x):
        self._x = x
        return batchnorm(x, self.p)

    def backward(self, g):
        dx, dg, db = batchnorm_backward(g, self._x, self.p)
        self.grad_gamma += dg
        self.grad_beta += db
        return dx


class Lif:
    def __init__(self, cfg: LifConfig):
        self.cfg = cfg
        self._tape = None

    def forward(self, x):
        s, self._tape = lif_sequence(x, self.cfg, return_tape=True)
        return s

    def backward(self, g):
        return lif_backward(self._tape, g)


class Dense:
    def __init__(self, weight):
        self.weight = weight
        self.grad = np.zeros_like(weight)
        self._x = None

    def forward(self, x):
        self._x = x
        return dense(x, self.weight)

    def backward(self, g):
        dx, dw = dense_backward(g, self._x, self.weight)
        self.grad += dw
        return dx


# -- specs --------------------------------------------------------------------

@dataclass
class BlockSpec:
    channels: int
    stride: int = 1
    kind: str = "ms"  # "ms" residual block or "plain" SN-Conv-BN layer

    def __post_init__(self):
        if self.kind not in ("ms", "plain"):
            raise NetworkConfigError(f"unknown block kind {self.kind!r}")
        if self.channels < 1 or self.stride < 1:
            raise NetworkConfigError("channels and stride must be positive")


@dataclass
class NetworkSpec:
    scheme: str = "gac"
    T: int = 4
    in_channels: int = 1
    image_size: tuple = (28, 28)
    stem_channels: int = 16
    stem_kernel: int = 3
    blocks: list = field(default_factory=lambda: [BlockSpec(16, 1), BlockSpec(32, 2)])
    n_classes: int = 10
    K: int = 4
    r: int | None = None
    lif: LifConfig = field(default_factory=LifConfig)
    head_pool: int = 1

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks]
        if isinstance(self.lif, dict):
            self.lif = LifConfig(**self.lif)
        self.image_size = tuple(self.image_size)
        if self.n_classes < 1:
            raise NetworkConfigError("n_classes must be positive")

    @property
    def encoder_channels(self) -> int:
        return self.stem_channels if self.scheme in TRAINABLE else self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# -- blocks -------------------------------------------------------------------

class MsBlock:
    """out = shortcut(x) + BN(Conv(SN(BN(Conv(SN(x))))))

    The projection shortcut (stride or width change) is a strided 1x1 conv +
    BN fed by the same first-layer spikes, so it stays spike-driven too.
    """

    def __init__(self, c_in, c_out, stride, lif, rng):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.sn1 = Lif(lif)
        self.conv1 = Conv(ConvParams(he_normal(rng, (c_out, c_in, 3, 3)), stride, same_padding(3)))
        self.bn1 = BatchNorm(BatchNormParams.identity(c_out))
        self.sn2 = Lif(lif)
        self.conv2 = Conv(ConvParams(he_normal(rng, (c_out, c_out, 3, 3)), 1, same_padding(3)))
        self.bn2 = BatchNorm(BatchNormParams.identity(c_out))
        self.proj = stride != 1 or c_in != c_out
        if self.proj:
            self.conv_sc = Conv(ConvParams(he_normal(rng, (c_out, c_in, 1, 1)), stride, 0))
            self.bn_sc = BatchNorm(BatchNormParams.identity(c_out))

    def convs(self):
        out = [("conv1", self.conv1, "s1"), ("conv2", self.conv2, "s2")]
        if self.proj:
            out.append(("conv_sc", self.conv_sc, "s1"))
        return out

    def bns(self):
        out = [("bn1", self.bn1), ("bn2", self.bn2)]
        if self.proj:
            out.append(("bn_sc", self.bn_sc))
        return out

    def forward(self, x, taps=None):
        steps = x.shape[0]
        s1 = self.sn1.forward(x)
        s2 = self.sn2.forward(_unfold(self.bn1.forward(self.conv1.forward(_fold(s1))), steps))
        d = _unfold(self.bn2.forward(self.conv2.forward(_fold(s2))), steps)
        sc = _unfold(self.bn_sc.forward(self.conv_sc.forward(_fold(s1))), steps) if self.proj else x
        if taps is not None:
            taps["s1"], taps["s2"] = s1, s2
        return sc + d

    def backward(self, g):
        steps = g.shape[0]
        g_s2 = self.conv2.backward(self.bn2.backward(_fold(g)))
        g_b1 = self.sn2.backward(_unfold(g_s2, steps))
        g_s1 = self.conv1.backward(self.bn1.backward(_fold(g_b1)))
        if self.proj:
            g_s1 = g_s1 + self.conv_sc.backward(self.bn_sc.backward(_fold(g)))
            g_x = 0.0
        else:
            g_x = g
        return g_x + self.sn1.backward(_unfold(g_s1, steps))


class PlainLayer:
    """out = BN(Conv(SN(x))): a non-residual spike-driven conv layer."""

    proj = False

    def __init__(self, c_in, c_out, stride, lif, rng):
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.sn1 = Lif(lif)
        self.conv1 = Conv(ConvParams(he_normal(rng, (c_out, c_in, 3, 3)), stride, same_padding(3)))
        self.bn1 = BatchNorm(BatchNormParams.identity(c_out))

    def convs(self):
        return [("conv1", self.conv1, "s1")]

    def bns(self):
        return [("bn1", self.bn1)]

    def forward(self, x, taps=None):
        steps = x.shape[0]
        s1 = self.sn1.forward(x)
        if taps is not None:
            taps["s1"] = s1
        return _unfold(self.bn1.forward(self.conv1.forward(_fold(s1))), steps)

    def backward(self, g):
        steps = g.shape[0]
        g_s1 = self.conv1.backward(self.bn1.backward(_fold(g)))
        return self.sn1.backward(_unfold(g_s1, steps))


def adaptive_pool_matrix(h: int, w: int, p: int) -> np.ndarray:
    """[p*p, h*w] averaging matrix; bin i spans floor(i*h/p) .. ceil((i+1)*h/p)."""
    if p < 1 or p > min(h, w):
        raise NetworkConfigError(f"head pool {p} does not fit a {h}x{w} map")
    rows = []
    for i in range(p):
        y0, y1 = (i * h) // p, -((-(i + 1) * h) // p)
        for j in range(p):
            x0, x1 = (j * w) // p, -((-(j + 1) * w) // p)
            m = np.zeros((h, w))
            m[y0:y1, x0:x1] = 1.0 / ((y1 - y0) * (x1 - x0))
            rows.append(m.ravel())
    return np.array(rows)


class Head:
    """SN -> average pool onto a p x p grid -> dense; per-step logits [T, B, n_classes].

    The dense layer reads channel-major pooled features (C * p * p of them).
    """

    def __init__(self, channels, n_classes, lif, rng, pool: int = 1):
        self.sn = Lif(lif)
        self.pool = pool
        self.fc = Dense(he_normal(rng, (n_classes, channels * pool * pool)))
        self._shape = None
        self._pm = None

    def _matrix(self, h, w):
        if self._pm is None or self._pm.shape[1] != h * w:
            self._pm = adaptive_pool_matrix(h, w, self.pool)
        return self._pm

    def forward(self, x, taps=None):
        steps = x.shape[0]
        s = self.sn.forward(x)
        if taps is not None:
            taps["s"] = s
        self._shape = s.shape
        t, b, c, h, w = s.shape
        pooled = (s.reshape(t * b, c, h * w) @ self._matrix(h, w).T).reshape(t * b, -1)
        return _unfold(self.fc.forward(pooled), steps)

    def backward(self, g):
        t, b, c, h, w = self._shape
        g_pool = self.fc.backward(_fold(g)).reshape(t * b, c, -1)
        g_s = (g_pool @ self._matrix(h, w)).reshape(self._shape)
        return self.sn.backward(g_s)


# -- network ------------------------------------------------------------------

@dataclass
class LayerInfo:
    """Geometry of one conv/fc layer, used for FLOP counting."""

    name: str
    kind: str  # "conv" or "fc"
    c_in: int
    c_out: int
    kh: int = 1
    kw: int = 1
    h_out: int = 1
    w_out: int = 1
    input_tap: str | None = None  # name of the spike tensor feeding the layer


class Network:
    def __init__(self, spec: NetworkSpec, encoder: EncoderSpec, blocks, head: Head):
        self.spec = spec
        self.encoder = encoder
        self.blocks = blocks
        self.head = head
        self.freeze_encoder = False
        self.check_spike_driven = False
        self.spike_checks = 0
        self.taps: dict[str, np.ndarray] = {}
        self._enc = None
        self._T = None
        self.set_mode(False)

    # -- bookkeeping ---------------------------------------------------------
    def _encoder_slots(self):
        e = self.encoder
        if e.scheme not in TRAINABLE:
            return []
        slots = [
            ("encoder.conv", e.conv, "kernel"),
            ("encoder.bn_gamma", e.bn, "gamma"),
            ("encoder.bn_beta", e.bn, "beta"),
        ]
        if e.scheme == "gac":
            slots += [
                ("encoder.w_m", e.gau, "w_m"),
                ("encoder.w_n", e.gau, "w_n"),
                ("encoder.sca", e.gau.sca, "kernel"),
            ]
        return slots

    def _layer_slots(self):
        """(name, owner, attr, grad_owner, grad_attr) for non-encoder parameters."""
        out = []
        for i, blk in enumerate(self.blocks):
            for cname, conv, _ in blk.convs():
                out.append((f"blocks.{i}.{cname}", conv.p, "kernel", conv, "grad"))
            for bname, bn in blk.bns():
                out.append((f"blocks.{i}.{bname}.gamma", bn.p, "gamma", bn, "grad_gamma"))
                out.append((f"blocks.{i}.{bname}.beta", bn.p, "beta", bn, "grad_beta"))
        out.append(("head.fc", self.head.fc, "weight", self.head.fc, "grad"))
        return out

    def named_parameters(self) -> dict[str, np.ndarray]:
        params = {name: getattr(owner, attr) for name, owner, attr in self._encoder_slots()}
        for name, owner, attr, _, _ in self._layer_slots():
            params[name] = getattr(owner, attr)
        return params

    def bn_params(self) -> dict[str, BatchNormParams]:
        out = {}
        if self.encoder.scheme in TRAINABLE:
            out["encoder.bn"] = self.encoder.bn
        for i, blk in enumerate(self.blocks):
            for bname, bn in blk.bns():
                out[f"blocks.{i}.{bname}"] = bn.p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.bn_params().items():
            out[f"{name}.running_mean"] = p.running_mean
            out[f"{name}.running_var"] = p.running_var
        return out

    def no_decay(self) -> set[str]:
        """Names of BN affine parameters (excluded from weight decay)."""
        return {n for n in self.named_parameters() if "bn" in n and (n.endswith("gamma") or n.endswith("beta"))}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.named_parameters().items()}
        out.update({k: v.copy() for k, v in self.named_buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {**self.named_parameters(), **self.named_buffers()}
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in targets.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"{k}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def set_mode(self, train: bool) -> None:
        self.training = train
        for p in self.bn_params().values():
            p.mode = "train" if train else "eval"

    def release(self) -> None:
        """Drop cached activations; the next call must be ``forward``."""
        stack = [self.head, *self.blocks]
        while stack:
            obj = stack.pop()
            for k, v in vars(obj).items():
                if isinstance(v, (Conv, BatchNorm, Lif, Dense)):
                    stack.append(v)
                elif k in ("_x", "_tape"):
                    setattr(obj, k, None)
        self._enc = None
        self.taps = {}

    def zero_grad(self) -> None:
        for _, _, _, owner, attr in self._layer_slots():
            getattr(owner, attr)[...] = 0.0
        self._enc_grads = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        enc = getattr(self, "_enc_grads", None)
        keymap = {
            "encoder.conv": "conv", "encoder.bn_gamma": "bn_gamma", "encoder.bn_beta": "bn_beta",
            "encoder.w_m": "w_m", "encoder.w_n": "w_n", "encoder.sca": "sca",
        }
        for name, owner, attr in self._encoder_slots():
            if enc is None or self.freeze_encoder:
                out[name] = np.zeros_like(getattr(owner, attr))
            else:
                out[name] = enc[keymap[name]]
        for name, _, _, owner, attr in self._layer_slots():
            out[name] = getattr(owner, attr)
        return out

    # -- geometry ------------------------------------------------------------
    def layer_info(self) -> list[LayerInfo]:
        """Conv/fc layers in forward order, encoder stem first (if it has one)."""
        h, w = self.spec.image_size
        infos = []
        if self.encoder.scheme in TRAINABLE:
            k = self.encoder.conv.kernel
            ho, wo = self.encoder.conv.output_hw(h, w)
            infos.append(LayerInfo("encoder.conv", "conv", k.shape[1], k.shape[0], k.shape[2], k.shape[3], ho, wo))
            h, w = ho, wo
        for i, blk in enumerate(self.blocks):
            hb, wb = h, w
            for cname, conv, tap in blk.convs():
                k = conv.p.kernel
                src = (h, w) if cname != "conv2" else (hb, wb)
                ho, wo = conv.p.output_hw(*src)
                if cname == "conv1":
                    hb, wb = ho, wo
                infos.append(LayerInfo(f"blocks.{i}.{cname}", "conv", k.shape[1], k.shape[0],
                                       k.shape[2], k.shape[3], ho, wo, f"blocks.{i}.{tap}"))
            h, w = hb, wb
        fcw = self.head.fc.weight
        infos.append(LayerInfo("head.fc", "fc", fcw.shape[1], fcw.shape[0], input_tap="head.s"))
        return infos

    # -- forward / backward --------------------------------------------------
    def encode(self, images, seed: int = 0, index_offset: int = 0) -> EncodedSequence:
        return encode(images, self.encoder, seed=seed, index_offset=index_offset)

    def forward(self, images, seed: int = 0, index_offset: int = 0, record_taps: bool = False) -> np.ndarray:
        """Per-step logits O [T, B, n_classes]."""
        enc = self.encode(images, seed, index_offset)
        self._enc = enc
        x = enc.data
        self._T = x.shape[0]
        taps = {} if (record_taps or self.check_spike_driven) else None
        if taps is not None:
            taps["encoder.out"] = x
        for i, blk in enumerate(self.blocks):
            bt = {} if taps is not None else None
            x = blk.forward(x, bt)
            if bt is not None:
                for k, v in bt.items():
                    taps[f"blocks.{i}.{k}"] = v
        ht = {} if taps is not None else None
        out = self.head.forward(x, ht)
        if ht is not None:
            taps["head.s"] = ht["s"]
        if self.check_spike_driven:
            self._assert_spike_driven(taps)
        self.taps = taps if record_taps else {}
        return out

    def _assert_spike_driven(self, taps):
        for info in self.layer_info():
            if info.input_tap is None:
                continue
            self.spike_checks += 1
            if not _is_binary(taps[info.input_tap]):
                raise SpikeDrivenError(f"{info.name} received non-binary input from {info.input_tap}")

    def backward(self, grad_out) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients for dL/dO [T, B, n]; return them by name."""
        if self._enc is None:
            raise RuntimeError("backward called before forward")
        g = self.head.backward(np.asarray(grad_out, dtype=np.float64))
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        if self.encoder.scheme in TRAINABLE and not self.freeze_encoder:
            self._enc_grads = encoder_backward(self.encoder, self._enc.tape, g)
        return self.grads()


def build(spec: NetworkSpec, seed: int = 0) -> Network:
    """Deterministically initialise a network from ``spec``."""
    rng = np.random.default_rng(seed)
    encoder = make_encoder(
        spec.scheme, spec.T, spec.in_channels, spec.stem_channels, rng,
        kernel=spec.stem_kernel, K=spec.K, r=spec.r, lif=spec.lif,
    )
    c = spec.encoder_channels
    blocks = []
    for b in spec.blocks:
        cls = MsBlock if b.kind == "ms" else PlainLayer
        blocks.append(cls(c, b.channels, b.stride, spec.lif, rng))
        c = b.channels
    head = Head(c, spec.n_classes, spec.lif, rng, spec.head_pool)
    return Network(spec, encoder, blocks, head)


def decode_mean(out) -> np.ndarray:
    """Average per-step outputs [T, B, n] over time."""
    out = np.asarray(out, dtype=np.float64)
    if out.ndim < 1 or out.shape[0] < 1:
        raise ValueError("decode_mean needs at least one time step")
    return out.mean(axis=0)


def ms_block_forward(x_membrane, block: MsBlock, taps=None):
    """Run one MS block over a membrane sequence [T, B, C, H, W]."""
    return block.forward(np.asarray(x_membrane, dtype=np.float64), taps)
