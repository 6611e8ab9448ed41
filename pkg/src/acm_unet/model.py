"""Network assembly: four-stage CNN encoder with state-space blocks behind
lightweight adapters, a three-stage wavelet-refined decoder, the segmentation
head, parameter counting, and binary checkpoints.

Channel ladder for base width C and input H = W: the stem halves resolution
to C channels, then the three bottleneck stages produce 4C at H/4, 8C at H/8
and 16C at H/16. Strided convolutions use asymmetric padding so every output
size divides exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .engine import EngineError, Parameter, ShapeMismatch, Tensor
from .layers import (
    BatchNorm2d,
    Conv2d,
    DWConv,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    avg_pool2x,
    bilinear_upsample2x,
    max_pool2d,
)
from .ssm import VSSBlock, default_dt_rank
from .wavelet import MSWT


class InvalidConfig(EngineError):
    pass


class CheckpointError(EngineError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class ModelConfig:
    base_width: int = 16
    n_vss: int = 2
    num_classes: int = 4
    input_size: int = 64
    use_mswt: bool = True
    use_vss: bool = True
    d_state: int = 16
    expansion_factor: float = 1.0
    wavelet_levels: int = 1
    depths: tuple = (3, 4, 6)
    dt_rank: int = 0          # 0 = derive from the token width
    shared_projections: bool = True

    def validate(self):
        if self.base_width < 4:
            raise InvalidConfig(f"base_width must be >= 4, got {self.base_width}")
        if self.n_vss < 0:
            raise InvalidConfig(f"n_vss must be >= 0, got {self.n_vss}")
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size % 16 != 0 or self.input_size <= 0:
            raise InvalidConfig(
                f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.depths) != 3 or any(d < 1 for d in self.depths):
            raise InvalidConfig(f"depths must be 3 positive ints, got {self.depths}")
        if self.d_state < 1 or self.expansion_factor <= 0:
            raise InvalidConfig("d_state must be >= 1 and expansion_factor > 0")
        if self.wavelet_levels < 1:
            raise InvalidConfig("wavelet_levels must be >= 1")
        return self

    def to_text(self) -> str:
        lines = [
            f"base_width={self.base_width}",
            f"n_vss={self.n_vss}",
            f"num_classes={self.num_classes}",
            f"input_size={self.input_size}",
            f"use_mswt={int(self.use_mswt)}",
            f"use_vss={int(self.use_vss)}",
            f"d_state={self.d_state}",
            f"expansion_factor={self.expansion_factor!r}",
            f"wavelet_levels={self.wavelet_levels}",
            f"depths={','.join(str(d) for d in self.depths)}",
            f"dt_rank={self.dt_rank}",
            f"shared_projections={int(self.shared_projections)}",
        ]
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("meta."):
                continue
            key, _, value = line.partition("=")
            if key == "depths":
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key == "expansion_factor":
                kwargs[key] = float(value)
            elif key in ("use_mswt", "use_vss", "shared_projections"):
                kwargs[key] = bool(int(value))
            else:
                kwargs[key] = int(value)
        return cls(**kwargs).validate()


def full_config(num_classes: int = 9) -> ModelConfig:
    """Full-scale configuration: C=64, 224x224, two scan blocks."""
    return ModelConfig(base_width=64, n_vss=2, num_classes=num_classes,
                       input_size=224).validate()


@dataclass
class EncoderFeatures:
    f1: Tensor  # [n, C, H/2, W/2]
    f2: Tensor  # [n, 4C, H/4, W/4]
    f3: Tensor  # [n, 8C, H/8, W/8]
    f4: Tensor  # [n, 16C, H/16, W/16]


# ---------------------------------------------------------------------------
# Encoder blocks


class Bottleneck(Module):
    """1x1 reduce, 3x3 spatial, 1x1 expand with a projected shortcut.

    Stride-2 variants pad the 3x3 asymmetrically ((1,0) per side) and
    average-pool the shortcut before its 1x1 projection, so strided output
    sizes stay integral on even inputs.
    """

    def __init__(self, rng, in_ch, width, out_ch, stride=1, dtype=eg.F32):
        super().__init__()
        self.stride = stride
        self.conv1 = Conv2d(rng, in_ch, width, 1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype)
        pad = ((1, 0), (1, 0)) if stride == 2 else (1, 1)
        self.conv2 = Conv2d(rng, width, width, 3, stride=stride, padding=pad,
                            bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype=dtype)
        self.conv3 = Conv2d(rng, width, out_ch, 1, bias=False, dtype=dtype)
        self.bn3 = BatchNorm2d(out_ch, dtype=dtype)
        # Zero gamma on the branch-terminal norm: blocks start as identities,
        # which keeps from-scratch short-budget training stable.
        self.bn3.gamma.data[:] = 0
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(rng, in_ch, out_ch, 1, bias=False,
                                   dtype=dtype)
            self.shortcut_bn = BatchNorm2d(out_ch, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x):
        y = eg.relu(self.bn1(self.conv1(x)))
        y = eg.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        if self.shortcut is None:
            s = x
        else:
            s = avg_pool2x(x) if self.stride == 2 else x
            s = self.shortcut_bn(self.shortcut(s))
        return eg.relu(eg.add(y, s))


class _Stage(Module):
    def __init__(self, rng, depth, in_ch, width, out_ch, stride, dtype):
        super().__init__()
        for i in range(depth):
            blk = Bottleneck(rng, in_ch if i == 0 else out_ch, width, out_ch,
                             stride if i == 0 else 1, dtype)
            setattr(self, f"block{i}", blk)
        self._depth = depth

    def forward(self, x):
        for i in range(self._depth):
            x = getattr(self, f"block{i}")(x)
        return x


class AdapterToTokens(Module):
    """Channel-first map -> channel-last tokens: LN over channels + linear."""

    def __init__(self, rng, ch, d_model, dtype=eg.F32):
        super().__init__()
        self.norm = LayerNorm(ch, dtype=dtype)
        self.proj = Linear(rng, ch, d_model, dtype=dtype)

    def forward(self, f):
        t = eg.transpose(f, (0, 2, 3, 1))
        return self.proj(self.norm(t))


class AdapterToMap(Module):
    """Inverse converter: linear then restore the channel-first layout."""

    def __init__(self, rng, d_model, ch, dtype=eg.F32):
        super().__init__()
        self.proj = Linear(rng, d_model, ch, dtype=dtype)

    def forward(self, t):
        return eg.transpose(self.proj(t), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Decoder blocks


class DecoderResBlock(Module):
    """Residual refinement block used after the fuse convolution.

    Bottleneck shape with a floor on the middle width so thin decoder stages
    keep enough capacity for boundary refinement.
    """

    def __init__(self, rng, ch, dtype=eg.F32):
        super().__init__()
        mid = min(ch, max(32, ch // 4))
        self.conv1 = Conv2d(rng, ch, mid, 1, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        self.conv2 = Conv2d(rng, mid, mid, 3, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(rng, mid, ch, 1, bias=False, dtype=dtype)
        self.bn3 = BatchNorm2d(ch, dtype=dtype)
        self.bn3.gamma.data[:] = 0

    def forward(self, x):
        y = eg.relu(self.bn1(self.conv1(x)))
        y = eg.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return eg.relu(eg.add(x, y))


class UpBlock(Module):
    """1x1 reduce -> bilinear 2x -> concat skip -> DWConv -> ResBlock -> MSWTs."""

    def __init__(self, rng, c_prev, c_skip, use_mswt=True, wavelet_levels=1,
                 dtype=eg.F32):
        super().__init__()
        self.reduce = Conv2d(rng, c_prev, c_skip, 1, bias=True, dtype=dtype)
        self.fuse = DWConv(rng, 2 * c_skip, c_skip, dtype=dtype)
        self.res = DecoderResBlock(rng, c_skip, dtype=dtype)
        self.use_mswt = use_mswt
        if use_mswt:
            self.mswt1 = MSWT(rng, c_skip, wavelet_levels, dtype=dtype)
            self.mswt2 = MSWT(rng, c_skip, wavelet_levels, dtype=dtype)

    def forward(self, prev, skip):
        if (skip.shape[2], skip.shape[3]) != (2 * prev.shape[2], 2 * prev.shape[3]):
            raise ShapeMismatch(
                f"skip {skip.shape} must be 2x the spatial size of prev {prev.shape}")
        x = bilinear_upsample2x(self.reduce(prev))
        x = eg.concat([x, skip], axis=1)
        x = self.fuse(x)
        x = self.res(x)
        if self.use_mswt:
            x = self.mswt1(x)
            x = self.mswt2(x)
        return x


class SegHead(Module):
    """Bilinear 2x, depthwise-separable conv, 1x1 projection to class logits."""

    def __init__(self, rng, ch, num_classes, dtype=eg.F32):
        super().__init__()
        self.fuse = DWConv(rng, ch, ch, dtype=dtype)
        self.classify = Conv2d(rng, ch, num_classes, 1, bias=True, dtype=dtype)
        # Damped classifier init keeps initial logits near zero.
        self.classify.weight.data *= 0.1

    def forward(self, x):
        return self.classify(self.fuse(bilinear_upsample2x(x)))


# ---------------------------------------------------------------------------
# Full model


class ACMUNet(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype=eg.F32):
        super().__init__()
        cfg.validate()
        self.config = cfg
        C = cfg.base_width
        d1, d2, d3 = cfg.depths
        enc = Module()
        enc.stem_conv = Conv2d(rng, 3, C, 7, stride=2,
                               padding=((3, 2), (3, 2)), bias=False, dtype=dtype)
        enc.stem_bn = BatchNorm2d(C, dtype=dtype)
        enc.stage1 = _Stage(rng, d1, C, C, 4 * C, 1, dtype)
        enc.stage2 = _Stage(rng, d2, 4 * C, 2 * C, 8 * C, 2, dtype)
        enc.stage3 = _Stage(rng, d3, 8 * C, 4 * C, 16 * C, 2, dtype)
        self.encoder = enc
        if cfg.use_vss and cfg.n_vss > 0:
            d_model = 16 * C
            rank = cfg.dt_rank if cfg.dt_rank > 0 else default_dt_rank(d_model)
            self.to_tokens = AdapterToTokens(rng, 16 * C, d_model, dtype)
            self.vss = ModuleList([
                VSSBlock(rng, d_model, cfg.d_state, cfg.expansion_factor,
                         rank, cfg.shared_projections, dtype)
                for _ in range(cfg.n_vss)])
            self.to_map = AdapterToMap(rng, d_model, 16 * C, dtype)
        self.up1 = UpBlock(rng, 16 * C, 8 * C, cfg.use_mswt,
                           cfg.wavelet_levels, dtype)
        self.up2 = UpBlock(rng, 8 * C, 4 * C, cfg.use_mswt,
                           cfg.wavelet_levels, dtype)
        self.up3 = UpBlock(rng, 4 * C, C, cfg.use_mswt,
                           cfg.wavelet_levels, dtype)
        self.head = SegHead(rng, C, cfg.num_classes, dtype)

    def encoder_forward(self, x: Tensor) -> EncoderFeatures:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected [n, 3, H, W], got {x.shape}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeMismatch(
                f"expected {cfg.input_size}x{cfg.input_size} input, got "
                f"{x.shape[2]}x{x.shape[3]}")
        enc = self.encoder
        f1 = eg.relu(enc.stem_bn(enc.stem_conv(x)))
        f2 = enc.stage1(max_pool2d(f1, (2, 2)))
        f3 = enc.stage2(f2)
        f4 = enc.stage3(f3)
        if cfg.use_vss and cfg.n_vss > 0:
            t = self.to_tokens(f4)
            for blk in self.vss:
                t = blk(t)
            f4 = self.to_map(t)
        return EncoderFeatures(f1, f2, f3, f4)

    def forward(self, x: Tensor) -> Tensor:
        f = self.encoder_forward(x)
        d = self.up1(f.f4, f.f3)
        d = self.up2(d, f.f2)
        d = self.up3(d, f.f1)
        return self.head(d)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=eg.F32) -> ACMUNet:
    """Deterministically initialized model; same seed gives identical bits."""
    rng = np.random.default_rng(seed)
    model = ACMUNet(rng, cfg, dtype)
    model.assign_names()
    return model


def count_params(model: Module) -> int:
    return sum(p.size for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoint format
#
# magic "ACMC" | u32 version | u32 config-text length | config text (utf-8,
# model config plus meta.* lines) | u32 record count | records | u32 CRC32 of
# everything before it.  Record: u32 name length | name | u8 rank | u32 dims
# (little-endian) | raw little-endian f32 payload.

CHECKPOINT_MAGIC = b"ACMC"
CHECKPOINT_VERSION = 1


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def save_checkpoint(model: ACMUNet, path, step: int = 0, seed: int = 0,
                    optimizer=None):
    """Serialize parameters (and optional optimizer moments) with a CRC."""
    text = model.config.to_text() + f"\nmeta.step={step}\nmeta.seed={seed}\n"
    records = [(name, p.data) for name, p in model.named_parameters()]
    records += [(f"buffer.{name}", b) for name, b in model.named_buffers()]
    if optimizer is not None:
        for name, m, v in optimizer.state_records():
            records.append((f"optim.m.{name}", m))
            records.append((f"optim.v.{name}", v))
    payload = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
    tb = text.encode("utf-8")
    payload += struct.pack("<I", len(tb)) + tb
    payload += struct.pack("<I", len(records))
    for name, arr in records:
        payload += _pack_record(name, arr)
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_checkpoint(path):
    """Parse a checkpoint file -> (config, meta dict, {name: f32 array})."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch("checkpoint CRC32 mismatch")
    r = _Reader(buf[4:-4])
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    text = r.take(r.u32()).decode("utf-8")
    meta = {}
    for line in text.splitlines():
        if line.startswith("meta."):
            k, _, v = line.partition("=")
            meta[k[5:]] = int(v)
    cfg = ModelConfig.from_text(text)
    count = r.u32()
    records = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        records[name] = np.ascontiguousarray(data)
    return cfg, meta, records


def load_checkpoint(path, dtype=eg.F32):
    """Rebuild the model from the embedded config and restore parameters."""
    cfg, meta, records = read_checkpoint(path)
    model = build_model(cfg, seed=meta.get("seed", 0), dtype=dtype)
    params = dict(model.named_parameters())
    stored = {k: v for k, v in records.items()
              if not k.startswith(("optim.", "buffer."))}
    if set(params) != set(stored):
        missing = set(params) ^ set(stored)
        raise ConfigMismatch(f"parameter name mismatch: {sorted(missing)[:5]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise ConfigMismatch(
                f"shape mismatch for {name}: {stored[name].shape} vs {p.shape}")
        p.data[...] = stored[name].astype(p.dtype)
    buffers = dict(model.named_buffers())
    for key, arr in records.items():
        if key.startswith("buffer."):
            name = key[7:]
            if name not in buffers or buffers[name].shape != arr.shape:
                raise ConfigMismatch(f"unexpected buffer record {name}")
            buffers[name][...] = arr.astype(buffers[name].dtype)
    optim_state = {k[8:]: v for k, v in records.items() if k.startswith("optim.m.")}
    optim_state = {
        name: (records[f"optim.m.{name}"], records[f"optim.v.{name}"])
        for name in optim_state
        if f"optim.v.{name}" in records
    }
    return model, meta, optim_state
