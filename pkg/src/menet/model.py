"""ME-Net assembly: per-modality stems, exchange-encoder levels with 2x2
downsampling, bottleneck cross-fusion and a U-shaped decoder with skips,
plus a no-exchange baseline sharing every other parameter.

The baseline keeps identical stems, encoder conv blocks, decoder and head;
it drops the AEM parameters and the attention projections and fuses the
bottleneck by plain concat + 1x1 conv. That makes the two variants differ
exactly by the exchange/fusion machinery and nothing else.
"""

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import tensor as T
from . import exchange as X
from . import fusion as FU
from .data import Case, DataError, Volume
from .exchange import AemParams, FeaturePair, eca_kernel_size
from .fusion import AttentionProjection
from .rng import DetRng
from .tensor import NARROW, ParamStore, Tensor

MNCK_MAGIC = b"MNCK"
MNCK_VERSION = 1
VARIANTS = ("menet", "baseline")


class CheckpointError(DataError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class MeNetConfig:
    levels: int = 4
    base_channels: int = 16
    height: int = 64
    width: int = 64
    lam: float = 1e-4
    variant: str = "menet"

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"need at least 2 levels, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        step = 1 << (self.levels - 1)
        if self.height % step or self.width % step or self.height < step or self.width < step:
            raise ValueError(f"input {self.height}x{self.width} not divisible by {step}")

    def widths(self) -> list:
        return [self.base_channels << l for l in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeNetConfig":
        return cls(**d)


@dataclass
class MeNetParams:
    config: MeNetConfig
    store: ParamStore


@dataclass
class SegLogits:
    """Pre-sigmoid 1xHxW prediction map."""
    logits: Tensor

    @property
    def probabilities(self) -> Tensor:
        return T.sigmoid(self.logits)


def _inventory(cfg: MeNetConfig) -> list:
    """(name, shape) pairs in declaration order; this order fixes both the
    init RNG stream and the checkpoint layout."""
    ws = cfg.widths()
    out = []

    def conv(prefix, o, c, k):
        out.append((f"{prefix}_w", (o, c, k, k)))
        out.append((f"{prefix}_b", (o,)))

    conv("stem_t1w", ws[0], 1, 3)
    conv("stem_fa", ws[0], 1, 3)
    for l in range(cfg.levels):
        c_in = ws[0] if l == 0 else ws[l - 1]
        for branch in ("t1w", "fa"):
            conv(f"enc{l}_{branch}_c1", ws[l], c_in, 3)
            conv(f"enc{l}_{branch}_c2", ws[l], ws[l], 3)
    if cfg.variant == "menet":
        for l in range(cfg.levels):
            c_in = ws[0] if l == 0 else ws[l - 1]
            out.append((f"aem{l}_eca_w", (1, 1, eca_kernel_size(c_in))))
            out.append((f"aem{l}_sp_w", (1, 2, X.SPATIAL_KERNEL_SIZE, X.SPATIAL_KERNEL_SIZE)))
            out.append((f"aem{l}_sp_b", (1,)))
        d = ws[-1]
        for mod in ("t1", "fa"):
            for piece in ("q", "k", "v"):
                out.append((f"fuse_{mod}_{piece}", (d, d)))
    conv("fuse_out", ws[-1], 2 * ws[-1], 1)
    for l in range(cfg.levels - 2, -1, -1):
        conv(f"up{l}", ws[l], ws[l + 1], 3)
        conv(f"dec{l}_c1", ws[l], 3 * ws[l], 3)
        conv(f"dec{l}_c2", ws[l], ws[l], 3)
    conv("head", 1, ws[0], 1)
    return out


def _glorot_limit(shape) -> float:
    if len(shape) == 4:
        o, c, kh, kw = shape
        fan_in, fan_out = c * kh * kw, o * kh * kw
    elif len(shape) == 3:
        fan_in = fan_out = shape[2]
    else:
        fan_in, fan_out = shape[-1], shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


# AEM gate bias starts at +2 (sigmoid ~= 0.88) so the exchange opens
# near-identity: each branch keeps its own modality until the gate learns
# what to mix in. A 0.5 gate would blend the streams half-and-half from
# step one and bury the FA signal the encoder needs early on.
AEM_GATE_BIAS = 2.0


def init(cfg: MeNetConfig, seed: int) -> MeNetParams:
    """Deterministic Glorot-uniform weights, zero biases except the AEM
    spatial-gate bias, which starts open (AEM_GATE_BIAS)."""
    rng = DetRng(seed)
    store = ParamStore()
    for name, shape in _inventory(cfg):
        if len(shape) == 1:
            fill = AEM_GATE_BIAS if name.endswith("_sp_b") else 0.0
            store.add(name, np.full(shape, fill, dtype=NARROW))
        else:
            lim = _glorot_limit(shape)
            store.add(name, rng.uniform(shape, -lim, lim).astype(NARROW))
    return MeNetParams(config=cfg, store=store)


def _conv_block(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    x = T.relu(T.conv2d(x, store[f"{prefix}_c1_w"], store[f"{prefix}_c1_b"], padding=1))
    return T.relu(T.conv2d(x, store[f"{prefix}_c2_w"], store[f"{prefix}_c2_b"], padding=1))


def _check_input(cfg: MeNetConfig, x: Tensor, name: str):
    if x.shape != (1, cfg.height, cfg.width):
        raise T.ShapeError(
            f"{name} must be 1x{cfg.height}x{cfg.width}, got {x.shape}")


def _pipeline(params: MeNetParams, t1w: Tensor, fa: Tensor) -> SegLogits:
    cfg, store = params.config, params.store
    _check_input(cfg, t1w, "t1w")
    _check_input(cfg, fa, "fa")
    pair = FeaturePair(
        t1w=T.relu(T.conv2d(t1w, store["stem_t1w_w"], store["stem_t1w_b"], padding=1)),
        fa=T.relu(T.conv2d(fa, store["stem_fa_w"], store["stem_fa_b"], padding=1)))

    skips = []
    for l in range(cfg.levels):
        t_prefix, f_prefix = f"enc{l}_t1w", f"enc{l}_fa"
        if cfg.variant == "menet":
            aem = AemParams(eca_kernel=store[f"aem{l}_eca_w"],
                            spatial_kernel=store[f"aem{l}_sp_w"],
                            spatial_bias=store[f"aem{l}_sp_b"])
            pair = X.exchange_stage(
                pair, cfg.lam, aem,
                conv_t1w=lambda t, p=t_prefix: _conv_block(store, p, t),
                conv_fa=lambda t, p=f_prefix: _conv_block(store, p, t))
        else:
            pair = FeaturePair(t1w=_conv_block(store, t_prefix, pair.t1w),
                               fa=_conv_block(store, f_prefix, pair.fa))
        skips.append(T.concat([pair.t1w, pair.fa], axis=0))
        if l < cfg.levels - 1:
            pair = FeaturePair(t1w=T.pool(pair.t1w, "spatial_max2x2"),
                               fa=T.pool(pair.fa, "spatial_max2x2"))

    if cfg.variant == "menet":
        proj_t1 = AttentionProjection(w_q=store["fuse_t1_q"], w_k=store["fuse_t1_k"],
                                      w_v=store["fuse_t1_v"])
        proj_fa = AttentionProjection(w_q=store["fuse_fa_q"], w_k=store["fuse_fa_k"],
                                      w_v=store["fuse_fa_v"])
        fused = FU.cross_fuse(pair, proj_t1, proj_fa).y
    else:
        fused = T.concat([pair.t1w, pair.fa], axis=0)
    d = T.relu(T.conv2d(fused, store["fuse_out_w"], store["fuse_out_b"]))

    for l in range(cfg.levels - 2, -1, -1):
        d = T.relu(T.conv2d(T.upsample_nearest2(d), store[f"up{l}_w"],
                            store[f"up{l}_b"], padding=1))
        d = T.concat([d, skips[l]], axis=0)
        d = _conv_block(store, f"dec{l}", d)
    return SegLogits(logits=T.conv2d(d, store["head_w"], store["head_b"]))


def forward(params: MeNetParams, t1w: Tensor, fa: Tensor) -> SegLogits:
    """Full exchange-and-fuse pipeline (or the baseline one, per config)."""
    return _pipeline(params, t1w, fa)


def forward_baseline(params: MeNetParams, t1w: Tensor, fa: Tensor) -> SegLogits:
    if params.config.variant != "baseline":
        raise ValueError("params were built for the menet variant")
    return _pipeline(params, t1w, fa)


class _inference:
    """Temporarily clears requires_grad on all parameters so forward passes
    skip graph construction."""

    def __init__(self, store: ParamStore):
        self.store = store

    def __enter__(self):
        self.saved = [(t, t.requires_grad) for t in self.store.tensors()]
        for t, _ in self.saved:
            t.requires_grad = False

    def __exit__(self, *exc):
        for t, flag in self.saved:
            t.requires_grad = flag


def predict_volume(params: MeNetParams, case: Case, threshold: float = 0.5) -> Volume:
    """Run every axial slice through the net and restack the thresholded
    probabilities. Ties at the threshold go to background (strict >)."""
    cfg = params.config
    z_ext = case.label.voxels.shape[0]
    out = np.zeros_like(case.label.voxels, dtype=np.uint8)
    with _inference(params.store):
        for z in range(z_ext):
            t1w = Tensor(case.t1w.voxels[z][None, :, :].astype(NARROW))
            fa = Tensor(case.fa.voxels[z][None, :, :].astype(NARROW))
            probs = forward(params, t1w, fa).probabilities.data[0]
            out[z] = (probs > threshold).astype(np.uint8)
    return Volume(out, case.label.spacing)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _config_json(cfg: MeNetConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: MeNetParams, path):
    blob = bytearray()
    blob += MNCK_MAGIC
    blob += struct.pack("<I", MNCK_VERSION)
    cfg_bytes = _config_json(params.config)
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes
    for name, t in params.store.items():
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    from pathlib import Path
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> MeNetParams:
    from pathlib import Path
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MNCK_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    r = _Reader(raw, path)
    r.take(4)
    version = r.u32()
    if version != MNCK_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = MeNetConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from exc

    store = ParamStore()
    expected = _inventory(cfg)
    for exp_name, exp_shape in expected:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        if name != exp_name or shape != exp_shape:
            raise CheckpointError(
                f"{path}: parameter {name} {shape} does not match "
                f"expected {exp_name} {exp_shape}")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        store.add(name, data.astype(NARROW))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return MeNetParams(config=cfg, store=store)
