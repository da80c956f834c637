"""3D ResNet-18 and its Residual Transformer Module variants.

Three variants share one stem and stages conv2-conv4:

* ``base``    - stage conv5 is two ordinary residual blocks (3D ResNet-18).
* ``rtm``     - stage conv5 is two RTMs whose attention uses height and width
                position encodings.
* ``rtm_tpe`` - as ``rtm`` plus the temporal position encoding (full BabyNet).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import io as tio
from .ops import (
    BatchNormState,
    batchnorm3d,
    conv3d,
    global_avg_pool,
    linear,
    relu,
    softmax,
)
from .tensor import DTYPE, ShapeError, Tensor, matmul, reshape, transpose

VARIANTS = ("base", "rtm", "rtm_tpe")
BASE_WIDTHS = (64, 64, 128, 256, 512)
STAGES = ("conv1", "conv2", "conv3", "conv4", "conv5")
INIT_SCHEME = "conv/linear U(+-1/sqrt(fan_in)); bn gamma=1 beta=0; positional N(0,0.02)"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "rtm_tpe"
    in_frames: int = 16
    in_height: int = 64
    in_width: int = 64
    num_heads: int = 4
    width_multiplier: Fraction = Fraction(1)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.width_multiplier = Fraction(self.width_multiplier).limit_denominator(1 << 16)
        self.variant = str(self.variant).lower()

    @property
    def widths(self) -> tuple[int, ...]:
        """Channel ladder scaled by the width multiplier, rounded up to a multiple of the head count."""
        h = self.num_heads
        return tuple(max(h, math.ceil(c * self.width_multiplier / h) * h) for c in BASE_WIDTHS)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("in_frames", "in_height", "in_width", "num_heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        if self.in_frames % 8:
            raise ConfigError(f"in_frames={self.in_frames} must be divisible by 8")
        if self.in_height % 16 or self.in_width % 16:
            raise ConfigError(f"in_height={self.in_height}, in_width={self.in_width} must be divisible by 16")
        if self.widths[-1] % self.num_heads:
            raise ConfigError("stage-5 channel count must be divisible by num_heads")
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps must be positive")

    def stage_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        """Closed-form (C, T, H, W) output of each stage."""
        t, h, w = self.in_frames, self.in_height, self.in_width
        c = self.widths
        return {
            "conv1": (c[0], t, h // 2, w // 2),
            "conv2": (c[1], t, h // 2, w // 2),
            "conv3": (c[2], t // 2, h // 4, w // 4),
            "conv4": (c[3], t // 4, h // 8, w // 8),
            "conv5": (c[4], t // 8, h // 16, w // 16),
        }

    def to_meta(self) -> dict[str, str]:
        d = asdict(self)
        d["width_multiplier"] = str(self.width_multiplier)
        return {k: str(v) for k, v in d.items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(
            variant=meta["variant"],
            in_frames=int(meta["in_frames"]),
            in_height=int(meta["in_height"]),
            in_width=int(meta["in_width"]),
            num_heads=int(meta["num_heads"]),
            width_multiplier=Fraction(meta["width_multiplier"]),
            bn_momentum=float(meta["bn_momentum"]),
            bn_eps=float(meta["bn_eps"]),
            seed=int(meta["seed"]),
        )


# -- module plumbing ---------------------------------------------------------

class Module:
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_bn_states(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None, bias=False):
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * int(np.prod(kernel))
        self.weight = _uniform(rng, (cout, cin, *kernel), fan_in)
        self.bias = _uniform(rng, (cout,), fan_in) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm3d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm3d(x, self.gamma, self.beta, self.state, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _uniform(rng, (fout, fin), fin)
        self.bias = _uniform(rng, (fout,), fin)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Projection(Module):
    """1x1x1 strided convolution + BN used on a skip path that changes shape."""

    def __init__(self, cin, cout, stride, rng, momentum, eps):
        self.conv = Conv3d(cin, cout, 1, stride, 0, rng)
        self.bn = BatchNorm3d(cout, momentum, eps)

    def forward(self, x):
        return self.bn(self.conv(x))


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN, add skip, ReLU."""

    def __init__(self, cin, cout, stride, rng, momentum=0.1, eps=1e-5):
        self.conv1 = Conv3d(cin, cout, 3, stride, 1, rng)
        self.bn1 = BatchNorm3d(cout, momentum, eps)
        self.conv2 = Conv3d(cout, cout, 3, 1, 1, rng)
        self.bn2 = BatchNorm3d(cout, momentum, eps)
        self.downsample = Projection(cin, cout, stride, rng, momentum, eps) if stride != 1 or cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        skip = x if self.downsample is None else self.downsample(x)
        if y.shape != skip.shape:
            raise ShapeError(f"residual branch {y.shape} does not match skip {skip.shape}")
        return relu(y + skip)


# -- attention ---------------------------------------------------------------

def positional_sum(rel_h: Tensor, rel_w: Tensor, rel_t: Tensor | None, variant: str = "rtm_tpe") -> Tensor:
    """Broadcast sum ``R_h[1,D,H,1] + R_w[1,D,1,W] (+ R_t[T,D,1,1])``.

    The temporal term is dropped for variants without temporal encoding,
    giving a ``[1,D,H,W]`` result that broadcasts over frames.
    """
    r = rel_h + rel_w
    if variant == "rtm_tpe" and rel_t is not None:
        r = r + rel_t
    return r


def mhsa3d_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, r: Tensor | None, heads: int):
    """Multi-head self-attention over all T*H*W positions of ``x[N,D,T,H,W]``.

    Per head: ``softmax(Q (K + r)^T / sqrt(d)) V`` with ``d = D / heads`` and
    the position term ``r[T|1,D,H,W]`` sliced along D like the keys.  Heads are
    concatenated along D with no output projection.  Returns
    ``(output[N,D,T,H,W], attention[N,heads,P,P])``.
    """
    n, dim, t, h, w = x.shape
    if dim % heads:
        raise ShapeError(f"channels {dim} not divisible by heads {heads}")
    d = dim // heads
    p = t * h * w
    q = reshape(conv3d(x, wq), (n, heads, d, p))
    k = reshape(conv3d(x, wk), (n, heads, d, p))
    v = reshape(conv3d(x, wv), (n, heads, d, p))
    if r is not None:
        if r.ndim != 4 or r.shape[1] != dim or r.shape[2:] != (h, w) or r.shape[0] not in (1, t):
            raise ShapeError(f"position encoding {r.shape} does not fit input {x.shape}")
        if r.shape[0] != t:
            r = r + Tensor(np.zeros((t, 1, 1, 1)))
        # [T,D,H,W] -> [1,heads,d,P] with positions in the same (T,H,W) order as x
        r = reshape(transpose(r, (1, 0, 2, 3)), (1, heads, d, p))
        k = k + r
    q = transpose(q, (0, 1, 3, 2))
    logits = matmul(q, k) * (1.0 / math.sqrt(d))
    attn = softmax(logits, axis=-1)
    out = matmul(v, transpose(attn, (0, 1, 3, 2)))
    return reshape(out, (n, dim, t, h, w)), attn


class MHSA3D(Module):
    def __init__(self, dim, heads, t, h, w, temporal: bool, positional: bool = True, rng=None):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        self.wq = Conv3d(dim, dim, 1, rng=rng)
        self.wk = Conv3d(dim, dim, 1, rng=rng)
        self.wv = Conv3d(dim, dim, 1, rng=rng)
        self.rel_h = self.rel_w = self.rel_t = None
        if positional:
            self.rel_h = Tensor(rng.normal(0, 0.02, (1, dim, h, 1)), requires_grad=True)
            self.rel_w = Tensor(rng.normal(0, 0.02, (1, dim, 1, w)), requires_grad=True)
        if temporal:
            self.rel_t = Tensor(rng.normal(0, 0.02, (t, dim, 1, 1)), requires_grad=True)
        self.last_attention: np.ndarray | None = None

    def position_encoding(self) -> Tensor | None:
        if self.rel_h is None:
            return None
        return positional_sum(self.rel_h, self.rel_w, self.rel_t, "rtm_tpe" if self.rel_t is not None else "rtm")

    def forward(self, x: Tensor) -> Tensor:
        out, attn = mhsa3d_forward(
            x, self.wq.weight, self.wk.weight, self.wv.weight, self.position_encoding(), self.heads
        )
        self.last_attention = attn.data
        return out


class RTM(Module):
    """Residual Transformer Module: ``BN(MHSA(ReLU(BN(Conv(x))))) + skip(x)``.

    No activation follows the residual add.
    """

    def __init__(self, cin, cout, stride, heads, t, h, w, temporal, rng, momentum=0.1, eps=1e-5):
        self.conv = Conv3d(cin, cout, 3, stride, 1, rng)
        self.bn1 = BatchNorm3d(cout, momentum, eps)
        self.mhsa = MHSA3D(cout, heads, t, h, w, temporal, rng=rng)
        self.bn2 = BatchNorm3d(cout, momentum, eps)
        self.downsample = Projection(cin, cout, stride, rng, momentum, eps) if stride != 1 or cin != cout else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.mhsa(relu(self.bn1(self.conv(x)))))
        skip = x if self.downsample is None else self.downsample(x)
        if y.shape != skip.shape:
            raise ShapeError(f"RTM branch {y.shape} does not match skip {skip.shape}")
        return y + skip


def rtm_forward(x: Tensor, rtm: RTM) -> Tensor:
    return rtm(x)


# -- full network ------------------------------------------------------------

class BabyNet(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        m, e = config.bn_momentum, config.bn_eps
        c = config.widths
        self.stem = Conv3d(1, c[0], (3, 7, 7), (1, 2, 2), (1, 3, 3), rng)
        self.stem_bn = BatchNorm3d(c[0], m, e)
        self.layer1 = [ResidualBlock(c[0], c[1], 1, rng, m, e), ResidualBlock(c[1], c[1], 1, rng, m, e)]
        self.layer2 = [ResidualBlock(c[1], c[2], 2, rng, m, e), ResidualBlock(c[2], c[2], 1, rng, m, e)]
        self.layer3 = [ResidualBlock(c[2], c[3], 2, rng, m, e), ResidualBlock(c[3], c[3], 1, rng, m, e)]
        _, t5, h5, w5 = config.stage_shapes()["conv5"]
        if config.variant == "base":
            self.layer4 = [ResidualBlock(c[3], c[4], 2, rng, m, e), ResidualBlock(c[4], c[4], 1, rng, m, e)]
        else:
            tpe = config.variant == "rtm_tpe"
            self.layer4 = [
                RTM(c[3], c[4], 2, config.num_heads, t5, h5, w5, tpe, rng, m, e),
                RTM(c[4], c[4], 1, config.num_heads, t5, h5, w5, tpe, rng, m, e),
            ]
        self.fc = Linear(c[4], 1, rng)

    def features(self, x: Tensor) -> dict[str, Tensor]:
        """Run the backbone, returning every stage output keyed by stage name (conv1..conv5)."""
        cfg = self.config
        expected = (1, cfg.in_frames, cfg.in_height, cfg.in_width)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"input shape {x.shape} does not match [N,{','.join(map(str, expected))}]")
        out = {}
        y = relu(self.stem_bn(self.stem(x)))
        out["conv1"] = y
        for name, blocks in zip(STAGES[1:], (self.layer1, self.layer2, self.layer3, self.layer4)):
            for block in blocks:
                y = block(y)
            out[name] = y
        return out

    def forward(self, x: Tensor) -> Tensor:
        """``[N,1,T0,H0,W0] -> [N,1]``."""
        y = self.features(x)["conv5"]
        return self.fc(global_avg_pool(y))

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> tuple[dict, dict]:
        params = {n: p.data.copy() for n, p in self.named_parameters()}
        buffers = {}
        for n, s in self.named_bn_states():
            buffers[f"{n}.running_mean"] = s.running_mean.copy()
            buffers[f"{n}.running_var"] = s.running_var.copy()
            buffers[f"{n}.num_updates"] = np.array([s.num_updates], dtype=DTYPE)
        return params, buffers

    def load_state(self, params: dict, buffers: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(params):
            missing = sorted(set(own) ^ set(params))
            raise ConfigError(f"checkpoint parameters do not match model: {missing[:5]}")
        for n, p in own.items():
            if p.shape != params[n].shape:
                raise ConfigError(f"{n}: checkpoint shape {params[n].shape} != model shape {p.shape}")
            p.data[...] = params[n]
        for n, s in self.named_bn_states():
            s.running_mean = np.asarray(buffers[f"{n}.running_mean"], dtype=DTYPE).copy()
            s.running_var = np.asarray(buffers[f"{n}.running_var"], dtype=DTYPE).copy()
            s.num_updates = int(buffers[f"{n}.num_updates"][0])

    def save(self, directory, extra_meta: dict | None = None) -> None:
        params, buffers = self.state_dict()
        meta = self.config.to_meta()
        meta["init_scheme"] = INIT_SCHEME
        meta.update(extra_meta or {})
        tio.save_checkpoint(directory, params, buffers, meta)

    @classmethod
    def load(cls, directory) -> tuple["BabyNet", dict]:
        params, buffers, meta = tio.load_checkpoint(Path(directory))
        model = cls(ModelConfig.from_meta(meta))
        model.load_state(params, buffers)
        return model, meta


def build_model(config: ModelConfig) -> BabyNet:
    return BabyNet(config)


def count_parameters(model: Module) -> int:
    return sum(p.size for p in model.parameters())
