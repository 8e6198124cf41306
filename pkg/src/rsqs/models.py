"""The four networks (embedder, classifier head, generator, repairer) and checkpoint IO."""

from __future__ import annotations

import copy
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import atomic_write
from .numerics import Tensor

CKPT_MAGIC = b"DUAL"
CKPT_VERSION = 1
NET_NAMES = ("phi", "theta", "gen", "rep")


class Module:
    """Holds named parameter tensors; subclasses define ``forward``."""

    def __init__(self):
        self.names: list[str] = []
        self.params: list[Tensor] = []

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.names.append(name)
        self.params.append(t)
        return t

    def param(self, name: str) -> Tensor:
        return self.params[self.names.index(name)]

    def frozen(self) -> "Module":
        """Shallow copy whose parameters are constants sharing the same storage."""
        twin = copy.copy(self)
        twin.params = [Tensor(p.data) for p in self.params]
        return twin

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays) -> None:
        for p, a in zip(self.params, arrays, strict=True):
            if a.shape != p.shape:
                raise nx.ShapeError(f"parameter shape {a.shape} != {p.shape}")
            p.data = np.array(a, dtype=np.float64)

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(m: Module, name: str, ci: int, co: int, rng, zero: bool = False) -> None:
    w = np.zeros((co, ci, 3, 3)) if zero else _uniform(rng, (co, ci, 3, 3), ci * 9)
    m.add_param(f"{name}.w", w)
    m.add_param(f"{name}.b", np.zeros(co))


def _conv(m: Module, name: str, x: Tensor, stride: int = 1) -> Tensor:
    return nx.conv2d(x, m.param(f"{name}.w"), m.param(f"{name}.b"), stride=stride, pad=1)


def _as_batch(x) -> Tensor:
    """(N, H, W) or (H, W) arrays become (N, 1, H, W) tensors."""
    if isinstance(x, Tensor):
        return x if x.ndim == 4 else nx.reshape(x, (-1, 1) + x.shape[-2:])
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return Tensor(arr[:, None])


def _down(n: int) -> int:
    return (n + 1) // 2


class EmbeddingNet(Module):
    """Three stride-2 conv blocks then an affine map to ``d`` features."""

    def __init__(self, hw=(16, 16), d: int = 16, channels=(8, 16, 16), rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hw, self.d, self.channels = tuple(hw), d, tuple(channels)
        ci = 1
        h, w = hw
        for i, co in enumerate(channels):
            _conv_params(self, f"conv{i}", ci, co, rng)
            ci = co
            h, w = _down(h), _down(w)
        self.flat = ci * h * w
        self.add_param("fc.w", _uniform(rng, (self.flat, d), self.flat))
        self.add_param("fc.b", np.zeros(d))

    def forward(self, x) -> Tensor:
        h = _as_batch(x)
        for i in range(len(self.channels)):
            h = nx.silu(_conv(self, f"conv{i}", h, stride=2))
        h = nx.reshape(h, (h.shape[0], -1))
        return nx.matmul(h, self.param("fc.w")) + self.param("fc.b")

    __call__ = forward


class ClassifierHead(Module):
    def __init__(self, d: int = 16, n_classes: int = 10, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.n_classes = d, n_classes
        self.add_param("w", _uniform(rng, (d, n_classes), d) / 2)
        self.add_param("b", np.zeros(n_classes))

    def logits(self, z: Tensor) -> Tensor:
        return nx.matmul(z, self.param("w")) + self.param("b")

    def forward(self, z: Tensor) -> Tensor:
        return nx.softmax(self.logits(z), axis=-1)

    __call__ = forward


class EncoderDecoder(Module):
    """Two stride-2 encoder convs, two upsampling decoder convs with additive
    skips, a full-resolution input conv and a 1-channel output conv."""

    def __init__(self, hw=(16, 16), width: int = 8, dropout: float = 0.0, zero_out: bool = False, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hw, self.width, self.dropout = tuple(hw), width, dropout
        c1, c2 = width, 2 * width
        _conv_params(self, "enc1", 1, c1, rng)
        _conv_params(self, "enc2", c1, c2, rng)
        _conv_params(self, "dec2", c2, c1, rng)
        _conv_params(self, "dec1", c1, c1, rng)
        _conv_params(self, "inp", 1, c1, rng)
        _conv_params(self, "out", c1, 1, rng, zero=zero_out)

    def _drop(self, h: Tensor, rng) -> Tensor:
        if rng is None or self.dropout <= 0:
            return h
        keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
        return nx.mul(h, keep)

    def residual(self, x: Tensor, rng=None) -> Tensor:
        """Raw correction map; ``rng`` enables dropout (training mode)."""
        n, _, h, w = x.shape
        e1 = self._drop(nx.silu(_conv(self, "enc1", x, stride=2)), rng)
        e2 = self._drop(nx.silu(_conv(self, "enc2", e1, stride=2)), rng)
        u2 = nx.resize_to(nx.upsample2x(e2), e1.shape[2], e1.shape[3])
        d2 = self._drop(nx.silu(_conv(self, "dec2", u2) + e1), rng)
        u1 = nx.resize_to(nx.upsample2x(d2), h, w)
        d1 = nx.silu(_conv(self, "dec1", u1) + _conv(self, "inp", x))
        return _conv(self, "out", d1)


class Generator(EncoderDecoder):
    """x_p = clamp(x + delta) with ||delta||_2 <= sqrt(eps) for every parameter value.

    The raw residual is squashed by tanh, then each sample is rescaled onto the
    ball when its norm exceeds the radius. Clamping to [0, 1] only moves pixels
    toward x (which is already in range), so it cannot leave the ball.
    """

    def __init__(self, hw=(16, 16), width: int = 8, eps: float | None = None, dropout: float = 0.1, rng=None):
        super().__init__(hw, width, dropout=dropout, rng=rng)
        self.eps = 0.05 * hw[0] * hw[1] if eps is None else float(eps)
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def perturbation(self, x, rng=None) -> Tensor:
        x = _as_batch(x)
        delta = nx.tanh(self.residual(x, rng))
        norm = nx.sqrt(nx.tsum(nx.square(delta), axis=(1, 2, 3), keepdims=True) + 1e-12)
        scale = nx.clip(nx.div(np.sqrt(self.eps), norm), None, 1.0)
        return nx.mul(delta, scale)

    def forward(self, x, rng=None) -> Tensor:
        x = _as_batch(x)
        return nx.clip(x + self.perturbation(x, rng), 0.0, 1.0)

    __call__ = forward


class Repairer(EncoderDecoder):
    """clamp(x + residual(x)); the output conv starts at zero so R starts as identity."""

    def __init__(self, hw=(16, 16), width: int = 8, identity_init: bool = True, rng=None):
        super().__init__(hw, width, dropout=0.0, zero_out=identity_init, rng=rng)

    def forward(self, x) -> Tensor:
        x = _as_batch(x)
        return nx.clip(x + self.residual(x), 0.0, 1.0)

    __call__ = forward


# ---------------------------------------------------------------- bundle

@dataclass
class ModelConfig:
    h: int = 16
    w: int = 16
    d: int = 16
    n_classes: int = 10
    eps: float | None = None
    dropout: float = 0.1
    width: int = 8
    channels: tuple[int, ...] = (8, 16, 16)


@dataclass
class ModelBundle:
    config: ModelConfig
    phi: EmbeddingNet
    theta: ClassifierHead
    gen: Generator
    rep: Repairer
    optim: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelBundle":
        from .rng import substream

        hw = (config.h, config.w)
        return cls(
            config=config,
            phi=EmbeddingNet(hw, config.d, config.channels, rng=substream(seed, "init.phi")),
            theta=ClassifierHead(config.d, config.n_classes, rng=substream(seed, "init.theta")),
            gen=Generator(hw, config.width, config.eps, config.dropout, rng=substream(seed, "init.gen")),
            rep=Repairer(hw, config.width, rng=substream(seed, "init.rep")),
        )

    def nets(self) -> dict[str, Module]:
        return {"phi": self.phi, "theta": self.theta, "gen": self.gen, "rep": self.rep}

    def snapshot(self) -> dict[str, list[np.ndarray]]:
        return {k: m.state() for k, m in self.nets().items()}

    def restore(self, snap: dict[str, list[np.ndarray]]) -> None:
        for k, m in self.nets().items():
            m.load_state(snap[k])

    def embed(self, images) -> np.ndarray:
        return self.phi(images).data


def embed(phi: EmbeddingNet, img) -> np.ndarray:
    """Embedding of a single (H, W) image as a length-d vector."""
    return phi(np.asarray(img)[None]).data[0]


def generate_perturbed(gen: Generator, img, rng=None) -> np.ndarray:
    out = gen(np.asarray(img)[None] if np.ndim(img) == 2 else img, rng)
    return out.data[:, 0] if np.ndim(img) == 3 else out.data[0, 0]


def repair(rep: Repairer, img) -> np.ndarray:
    out = rep(np.asarray(img)[None] if np.ndim(img) == 2 else img)
    return out.data[:, 0] if np.ndim(img) == 3 else out.data[0, 0]


# ---------------------------------------------------------------- checkpoint format
#
# magic "DUAL" | version u16 | config: u32 length + UTF-8 JSON
# then per network: name (u16 length + UTF-8) | n_params u32 |
#   per parameter: ndim u8 | dims u32 * ndim | float64 LE data

def _config_json(cfg: ModelConfig) -> bytes:
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    return json.dumps(d, sort_keys=True).encode("utf-8")


def dump_checkpoint(bundle: ModelBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    cfg = _config_json(bundle.config)
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    for name, net in bundle.nets().items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<I", len(net.params)))
        for p in net.params:
            buf.write(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
            buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint_bytes(raw: bytes) -> ModelBundle:
    view = memoryview(raw)
    if bytes(view[:4]) != CKPT_MAGIC:
        raise ValueError("not a DUAL checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 6
    (n,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    cfg_d = json.loads(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    cfg_d["channels"] = tuple(cfg_d["channels"])
    bundle = ModelBundle.init(ModelConfig(**cfg_d))
    nets = bundle.nets()
    while pos < len(raw):
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode("utf-8")
        pos += ln
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays.append(np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy())
            pos += 8 * size
        if name not in nets:
            raise ValueError(f"unknown network {name!r} in checkpoint")
        nets[name].load_state(arrays)
    return bundle


def save_checkpoint(path: str | os.PathLike, bundle: ModelBundle) -> None:
    atomic_write(path, dump_checkpoint(bundle))


def load_checkpoint(path: str | os.PathLike) -> ModelBundle:
    with open(path, "rb") as f:
        return load_checkpoint_bytes(f.read())
