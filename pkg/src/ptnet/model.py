"""PTNet assembly: performer encoders/decoders, transformer bottleneck, two-branch pyramid.

Layout of one branch with E strided encoders (E = len(enc_channels)):

    x -> stem PE (n=7, S=1) -> PE_1 .. PE_E (n=3, S=2) -> bottleneck (S=2)
      -> PD mirroring the bottleneck -> PDs mirroring PE_E .. PE_1 -> final PD (n=7, S=1)

so a branch downsamples E+1 times and upsamples E+1 times. The PD mirroring
an encoder concatenates that encoder's output before upsampling and its input
after upsampling ("both" skip mode). The low branch runs on the half-resolution
image; its final features are upsampled and concatenated into the high
branch's final PD, followed by a per-pixel linear projection to the output.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import TransformerBlock, positional_encoding
from .errors import ConfigError, DataError, DimensionError
from .layers import Linear, Module, WindowLinear
from .patching import (
    UnfoldSpec,
    grid_to_tokens,
    resize_bilinear,
    resize_bilinear_backward,
    tokens_to_grid,
    unfold,
    unfold_backward,
)
from .tensor import ParameterStore, Rng, read_ptt1, write_ptt1

SKIP_MODES = ("both", "input", "output")


@dataclass
class PTNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    stem_window: int = 7
    stem_channels: int = 32
    window: int = 3
    stride: int = 2
    enc_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    dec_channels: list[int] = field(default_factory=lambda: [64, 32, 32, 32])
    final_channels: int = 32
    heads: int = 4
    embed_dims: list[int] = field(default_factory=lambda: [256, 512])
    depths: list[int] = field(default_factory=lambda: [1, 2])
    bottleneck_ffn_ratio: float = 2.0
    performer_ffn_ratio: float = 1.0
    favor_features: int | None = None
    activation: str = "gelu"
    prenorm: bool = False
    skip: str = "both"
    upsample: str = "bilinear"
    branches: int = 2

    def __post_init__(self):
        self.enc_channels = list(self.enc_channels)
        self.dec_channels = list(self.dec_channels)
        self.embed_dims = list(self.embed_dims)
        self.depths = list(self.depths)
        self.validate()

    def validate(self) -> None:
        if len(self.dec_channels) != len(self.enc_channels) + 1:
            raise ConfigError(
                f"dec_channels needs {len(self.enc_channels) + 1} entries (one per downsampling stage "
                f"incl. the bottleneck), got {len(self.dec_channels)}"
            )
        if self.branches not in (1, 2):
            raise ConfigError(f"branches must be 1 or 2, got {self.branches}")
        if len(self.embed_dims) < self.branches or len(self.depths) < self.branches:
            raise ConfigError("embed_dims and depths need one entry per branch")
        for d in self.embed_dims:
            if d % 2:
                raise ConfigError(f"embedding dim {d} must be even for positional encoding")
            if d % self.heads:
                raise ConfigError(f"embedding dim {d} not divisible by {self.heads} heads")
        for c in [self.stem_channels, *self.enc_channels, *self.dec_channels, self.final_channels]:
            if c % self.heads:
                raise ConfigError(f"channel count {c} not divisible by {self.heads} heads")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"skip must be one of {SKIP_MODES}, got {self.skip!r}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample must be bilinear or nearest, got {self.upsample!r}")

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return self.stride ** (len(self.enc_channels) + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "PTNetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def ptnet_s(**overrides) -> PTNetConfig:
    return PTNetConfig(**{"depths": [1, 2], **overrides})


def ptnet_l(**overrides) -> PTNetConfig:
    return PTNetConfig(**{"depths": [9, 9], **overrides})


def ptnet_s_reduced(**overrides) -> PTNetConfig:
    """Desk-scale PTNet-S used for the synthetic training experiment."""
    base = dict(
        stem_channels=16,
        enc_channels=[16, 32, 64],
        dec_channels=[32, 16, 16, 16],
        final_channels=16,
        embed_dims=[64, 128],
        depths=[1, 2],
    )
    base.update(overrides)
    return PTNetConfig(**base)


def gradcheck_config(**overrides) -> PTNetConfig:
    """Smallest full two-branch model: one strided PE per branch, one bottleneck block."""
    base = dict(
        stem_channels=4,
        enc_channels=[4],
        dec_channels=[4, 4],
        final_channels=4,
        heads=2,
        embed_dims=[8, 8],
        depths=[1, 1],
    )
    base.update(overrides)
    return PTNetConfig(**base)


PRESETS = {
    "ptnet_s": ptnet_s,
    "ptnet_l": ptnet_l,
    "ptnet_s_reduced": ptnet_s_reduced,
    "gradcheck": gradcheck_config,
}


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


class PerformerEncoder(Module):
    """unfold -> token embed -> FAVOR+ transformer block -> grid."""

    def __init__(self, store, name, c_in, c_out, spec: UnfoldSpec, cfg: PTNetConfig, rng: Rng, dtype):
        self.name, self.spec, self.c_out = name, spec, c_out
        self.embed = WindowLinear(store, f"{name}.embed", c_in, spec, c_out, rng.child(0), dtype=dtype)
        self.block = TransformerBlock(
            store, f"{name}.block", c_out, cfg.heads, rng.child(1), "favor",
            cfg.performer_ffn_ratio, cfg.favor_features, cfg.prenorm, cfg.activation, dtype,
        )
        self._c_shape = None

    def forward(self, x):
        X, Y = x.shape[2:]
        gx, gy = self.spec.grid(X, Y)
        self._c_shape = (X, Y, gx, gy)
        t = self.block.forward(self.embed.forward(x))
        return tokens_to_grid(t, gx, gy)

    def backward(self, grad, need_dx=True):
        self._cached("_c_shape")
        return self.embed.backward(self.block.backward(grid_to_tokens(grad)), need_dx)


class PerformerDecoder(Module):
    """[concat pre-skips] -> resize to target -> [concat post-skips] -> stride-1 unfold -> embed -> block -> grid."""

    def __init__(self, store, name, c_prev, pre_chs, post_chs, c_out, n, cfg: PTNetConfig, rng: Rng, dtype):
        self.name = name
        self.pre_chs, self.post_chs = list(pre_chs), list(post_chs)
        self.c_mid = c_prev + sum(self.pre_chs)
        self.spec = UnfoldSpec(n, 1)
        self.mode = cfg.upsample
        c_in = self.c_mid + sum(self.post_chs)
        self.embed = WindowLinear(store, f"{name}.embed", c_in, self.spec, c_out, rng.child(0), dtype=dtype)
        self.block = TransformerBlock(
            store, f"{name}.block", c_out, cfg.heads, rng.child(1), "favor",
            cfg.performer_ffn_ratio, cfg.favor_features, cfg.prenorm, cfg.activation, dtype,
        )
        self._c_shape = None

    def forward(self, prev, pre=(), post=(), size=None):
        h = np.concatenate([prev, *pre], axis=1) if pre else prev
        in_size = h.shape[2:]
        size = tuple(size or in_size)
        h = resize_bilinear(h, size, mode=self.mode)
        if post:
            h = np.concatenate([h, *post], axis=1)
        self._c_shape = (in_size, size)
        t = self.block.forward(self.embed.forward(h))
        return tokens_to_grid(t, *size)

    def backward(self, grad):
        """Returns (d_prev, [d_pre...], [d_post...])."""
        in_size, size = self._cached("_c_shape")
        g = self.embed.backward(self.block.backward(grid_to_tokens(grad)))
        d_post = []
        off = self.c_mid
        for c in self.post_chs:
            d_post.append(g[:, off : off + c])
            off += c
        g = resize_bilinear_backward(g[:, : self.c_mid], in_size, mode=self.mode)
        c_prev = self.c_mid - sum(self.pre_chs)
        d_pre = []
        off = c_prev
        for c in self.pre_chs:
            d_pre.append(g[:, off : off + c])
            off += c
        return g[:, :c_prev], d_pre, d_post


class Bottleneck(Module):
    """Strided unfold -> linear projection -> + sinusoidal positions -> M exact-attention blocks -> grid."""

    def __init__(self, store, name, c_in, dim, depth, cfg: PTNetConfig, rng: Rng, dtype):
        self.name, self.dim = name, dim
        self.spec = UnfoldSpec(cfg.window, cfg.stride)
        self.proj = Linear(store, f"{name}.proj", c_in * cfg.window**2, dim, rng.child(0), dtype=dtype)
        self.blocks = [
            TransformerBlock(
                store, f"{name}.block{i}", dim, cfg.heads, rng.child(1, i), "exact",
                cfg.bottleneck_ffn_ratio, None, cfg.prenorm, cfg.activation, dtype,
            )
            for i in range(depth)
        ]
        self._c_shape = None

    def forward(self, x):
        X, Y = x.shape[2:]
        gx, gy = self.spec.grid(X, Y)
        self._c_shape = (X, Y, gx, gy)
        t = self.proj.forward(unfold(x, self.spec))
        t = t + positional_encoding(gx * gy, self.dim, t.dtype)
        for blk in self.blocks:
            t = blk.forward(t)
        return tokens_to_grid(t, gx, gy)

    def backward(self, grad):
        X, Y, gx, gy = self._cached("_c_shape")
        g = grid_to_tokens(grad)
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return unfold_backward(self.proj.backward(g), self.spec, X, Y)


class Branch(Module):
    def __init__(self, store, name, cfg: PTNetConfig, embed_dim, depth, extra_ch, rng: Rng, dtype):
        self.name, self.cfg = name, cfg
        E = len(cfg.enc_channels)
        use_in, use_out = cfg.skip in ("both", "input"), cfg.skip in ("both", "output")
        chans = [cfg.in_channels, cfg.stem_channels, *cfg.enc_channels]  # chans[k] = channels of feats[k]
        self.encoders = [
            PerformerEncoder(store, f"{name}.pe0", cfg.in_channels, cfg.stem_channels,
                             UnfoldSpec(cfg.stem_window, 1), cfg, rng.child(0), dtype)
        ]
        for k in range(1, E + 1):
            self.encoders.append(
                PerformerEncoder(store, f"{name}.pe{k}", chans[k], chans[k + 1],
                                 UnfoldSpec(cfg.window, cfg.stride), cfg, rng.child(k), dtype)
            )
        self.bottleneck = Bottleneck(store, f"{name}.bottleneck", chans[E + 1], embed_dim, depth, cfg, rng.child(100), dtype)
        self.decoders = [
            PerformerDecoder(store, f"{name}.pd0", embed_dim, [], [], cfg.dec_channels[0], cfg.window, cfg, rng.child(200), dtype)
        ]
        self.mirrors = []  # encoder stage index each upsampling PD mirrors
        for i, k in enumerate(range(E, 0, -1), start=1):
            pre = [chans[k + 1]] if use_out else []
            post = [chans[k]] if use_in else []
            self.decoders.append(
                PerformerDecoder(store, f"{name}.pd{i}", cfg.dec_channels[i - 1], pre, post,
                                 cfg.dec_channels[i], cfg.window, cfg, rng.child(200 + i), dtype)
            )
            self.mirrors.append(k)
        post = ([chans[1]] if use_out else []) + ([chans[0]] if use_in else []) + ([extra_ch] if extra_ch else [])
        self.final = PerformerDecoder(store, f"{name}.pd_final", cfg.dec_channels[-1], [], post,
                                      cfg.final_channels, cfg.stem_window, cfg, rng.child(300), dtype)
        self.use_in, self.use_out = use_in, use_out
        self._c_feats = None

    def forward(self, x, extra=None):
        feats = [x]
        for enc in self.encoders:
            feats.append(enc.forward(feats[-1]))
        self._c_feats = [f.shape for f in feats]
        b = self.bottleneck.forward(feats[-1])
        d = self.decoders[0].forward(b, size=feats[-1].shape[2:])
        for pd, k in zip(self.decoders[1:], self.mirrors):
            pre = [feats[k + 1]] if self.use_out else []
            post = [feats[k]] if self.use_in else []
            d = pd.forward(d, pre, post, size=feats[k].shape[2:])
        post = ([feats[1]] if self.use_out else []) + ([feats[0]] if self.use_in else [])
        if extra is not None:
            post.append(extra)
        return self.final.forward(d, [], post)

    def backward(self, grad, has_extra=False):
        """Returns (d_x, d_extra)."""
        shapes = self._cached("_c_feats")
        gfeat = [np.zeros(s, dtype=grad.dtype) for s in shapes]
        d, _, d_post = self.final.backward(grad)
        d_post = list(d_post)
        d_extra = d_post.pop() if has_extra else None
        if self.use_out:
            gfeat[1] += d_post.pop(0)
        if self.use_in:
            gfeat[0] += d_post.pop(0)
        for pd, k in zip(reversed(self.decoders[1:]), reversed(self.mirrors)):
            d, d_pre, d_post = pd.backward(d)
            if self.use_out:
                gfeat[k + 1] += d_pre[0]
            if self.use_in:
                gfeat[k] += d_post[0]
        d, _, _ = self.decoders[0].backward(d)
        gfeat[-1] += self.bottleneck.backward(d)
        for k in range(len(self.encoders) - 1, -1, -1):
            gfeat[k] += self.encoders[k].backward(gfeat[k + 1])
        return gfeat[0], d_extra


class PTNet(Module):
    def __init__(self, cfg: PTNetConfig, seed: int = 0, dtype=np.float32):
        self.cfg, self.seed, self.dtype = cfg, seed, np.dtype(dtype)
        self.store = ParameterStore()
        rng = Rng(seed)
        if cfg.branches == 2:
            self.low = Branch(self.store, "low", cfg, cfg.embed_dims[1], cfg.depths[1], 0, rng.child(2), dtype)
            extra = cfg.final_channels
        else:
            self.low, extra = None, 0
        self.high = Branch(self.store, "high", cfg, cfg.embed_dims[0], cfg.depths[0], extra, rng.child(1), dtype)
        self.proj = Linear(self.store, "spatial_proj", cfg.final_channels, cfg.out_channels, rng.child(3), dtype=dtype)
        self._c_size = None

    def check_input(self, x) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"expected input (N, {self.cfg.in_channels}, X, Y), got {x.shape}")
        mult = self.cfg.multiple
        if x.shape[2] % mult or x.shape[3] % mult:
            raise ConfigError(f"input extents {x.shape[2]}x{x.shape[3]} must be multiples of {mult}")

    def forward(self, x):
        self.check_input(x)
        x = x.astype(self.dtype, copy=False)
        X, Y = x.shape[2:]
        extra = None
        if self.low is not None:
            low = self.low.forward(resize_bilinear(x, factor=0.5))
            extra = resize_bilinear(low, (X, Y), mode=self.cfg.upsample)
            self._c_size = low.shape[2:]
        else:
            self._c_size = ()
        h = self.high.forward(x, extra)
        return tokens_to_grid(self.proj.forward(grid_to_tokens(h)), X, Y)

    def backward(self, grad):
        """Accumulate parameter gradients for d(loss)/d(output) = ``grad``; returns d(loss)/d(input)."""
        low_size = self._cached("_c_size")
        X, Y = grad.shape[2:]
        g = tokens_to_grid(self.proj.backward(grid_to_tokens(grad.astype(self.dtype, copy=False))), X, Y)
        dx, d_extra = self.high.backward(g, has_extra=self.low is not None)
        if self.low is not None:
            d_low = resize_bilinear_backward(d_extra, low_size, mode=self.cfg.upsample)
            d_lowin, _ = self.low.backward(d_low)
            dx = dx + resize_bilinear_backward(d_lowin, (X, Y))
        return dx

    def predict(self, x, batch_size=8):
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        self.clear_cache()
        return np.concatenate(out, axis=0)

    def param_count(self) -> int:
        return self.store.param_count()

    def block_counts(self) -> dict[str, int]:
        out = {"high": len(self.high.bottleneck.blocks)}
        if self.low is not None:
            out["low"] = len(self.low.bottleneck.blocks)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        expected = set(self.store.params) | set(self.store.buffers)
        missing, extra = expected - set(tensors), set(tensors) - expected
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, arr in tensors.items():
            target = self.store[name]
            if target.shape != arr.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, model expects {target.shape}")
            target[...] = arr


def build_model(cfg: PTNetConfig, seed: int = 0, dtype=np.float32) -> PTNet:
    return PTNet(cfg, seed, dtype)


# ---------------------------------------------------------------------------
# PTCK checkpoints
# ---------------------------------------------------------------------------

PTCK_MAGIC = b"PTCK"
PTCK_VERSION = 1


def checkpoint_bytes(model: PTNet, meta: dict | None = None) -> bytes:
    import io

    tensors = {**model.store.params, **model.store.buffers}
    meta = {"config": model.cfg.to_dict(), "seed": model.seed, "dtype": model.dtype.name, **(meta or {})}
    buf = io.BytesIO()
    buf.write(PTCK_MAGIC)
    buf.write(struct.pack("<II", PTCK_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_ptt1(buf, arr)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def save_checkpoint(path, model: PTNet, meta: dict | None = None) -> None:
    with open(path, "wb") as fp:
        fp.write(checkpoint_bytes(model, meta))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    from pathlib import Path

    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fp:
        if fp.read(4) != PTCK_MAGIC:
            raise DataError(f"{path}: not a PTCK checkpoint")
        version, count = struct.unpack("<II", fp.read(8))
        if version != PTCK_VERSION:
            raise DataError(f"{path}: unsupported PTCK version {version}")
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", fp.read(2))
            name = fp.read(n).decode("utf-8")
            tensors[name] = read_ptt1(fp)
        (n,) = struct.unpack("<I", fp.read(4))
        meta = json.loads(fp.read(n).decode("utf-8"))
    return tensors, meta


def load_checkpoint(path) -> tuple[PTNet, dict]:
    tensors, meta = read_checkpoint(path)
    cfg = PTNetConfig.from_dict(meta["config"])
    model = PTNet(cfg, meta.get("seed", 0), np.dtype(meta.get("dtype", "float32")))
    model.load_state(tensors)
    return model, meta


# ---------------------------------------------------------------------------
# Whole-model gradient check
# ---------------------------------------------------------------------------


def check_model_gradients(
    cfg: PTNetConfig | None = None,
    size: int = 16,
    batch: int = 2,
    seed: int = 0,
    h: float = 1e-6,
    tol: float = 1e-4,
    corrupt: str | None = None,
    max_entries: int | None = None,
):
    """Central-difference check of every parameter of a float64 PTNet under an MSE loss.

    ``corrupt`` names a parameter whose analytic gradient is scaled by 1.5
    after backward; it exists to show the check can fail.
    """
    from .tensor import grad_check

    cfg = cfg or gradcheck_config()
    model = PTNet(cfg, seed=seed, dtype=np.float64)
    rng = Rng(seed).child(99)
    x = rng.child(0).uniform(size=(batch, cfg.in_channels, size, size))
    y = rng.child(1).uniform(size=(batch, cfg.out_channels, size, size))
    model.check_input(x)
    if corrupt is not None and corrupt not in model.store.params:
        raise ConfigError(f"unknown parameter {corrupt!r} for --corrupt")

    def loss():
        out = model.forward(x)
        model.clear_cache()
        return float(np.mean((out - y) ** 2))

    def analytic():
        out = model.forward(x)
        model.backward(2.0 * (out - y) / out.size)
        if corrupt is not None:
            model.store.grads[corrupt] *= 1.5

    return grad_check(loss, model.store, h=h, tol=tol, analytic=analytic, max_entries=max_entries, rng=rng.child(2))
