"""Synthetic bimodal phantom dataset, deterministic splits, slice extraction
and the MVOL volume file format.

Volumes store voxels as a (Z, Y, X) array so that serialization is x-fastest
and `voxels[z]` is an axial H x W slice. The phantom mimics thin elongated
pathways: tubes following smooth in-plane curves, bright in the FA channel,
only faintly visible over the structured T1w background.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import DetRng, hash_seeds

DEFAULT_SPACING = (1.25, 1.25, 1.25)
MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1


class DataError(Exception):
    """Dataset or volume-file problem (CLI exit code 2)."""


class MvolBadMagic(DataError):
    pass


class MvolTruncated(DataError):
    pass


class MvolBadVersion(DataError):
    pass


class MvolBadDtype(DataError):
    pass


@dataclass
class Volume:
    """3D scalar grid with physical spacing in mm per (x, y, z) axis."""
    voxels: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume needs positive 3D extents, got {self.voxels.shape}")
        if min(self.spacing) <= 0:
            raise DataError(f"spacing must be positive, got {self.spacing}")

    @property
    def extents(self) -> tuple:
        z, y, x = self.voxels.shape
        return (x, y, z)

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.voxels))


@dataclass
class Case:
    """One subject: co-registered T1w-like, FA-like and binary label volumes."""
    id: str
    t1w: Volume
    fa: Volume
    label: Volume

    def __post_init__(self):
        for v in (self.fa, self.label):
            if v.voxels.shape != self.t1w.voxels.shape or v.spacing != self.t1w.spacing:
                raise DataError(f"case {self.id}: volumes not co-registered")
        for name, v in (("t1w", self.t1w), ("fa", self.fa)):
            lo, hi = float(v.voxels.min()), float(v.voxels.max())
            if lo < 0.0 or hi > 1.0:
                raise DataError(f"case {self.id}: {name} not normalized to [0,1]")


@dataclass
class SplitSpec:
    """Disjoint train/val/test case-id lists covering the whole dataset."""
    train: list
    val: list
    test: list
    seed: int
    ratio: tuple = (8, 1, 1)

    def all_ids(self) -> list:
        return self.train + self.val + self.test


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _bezier(t: np.ndarray, v0, v1, v2, v3) -> np.ndarray:
    s = 1.0 - t
    return s ** 3 * v0 + 3 * s ** 2 * t * v1 + 3 * s * t ** 2 * v2 + t ** 3 * v3


def _stamp_tube(label: np.ndarray, rng: DetRng, extents):
    """Rasterize one tube along a smooth in-plane curve into `label`."""
    x_ext, y_ext, z_ext = extents
    radius = rng.uniform((), 1.0, 3.0)
    dominant = rng.integers(0, 2)  # 0: runs along x, 1: along y

    def ctrl(ext):
        return [rng.uniform((), 0.2 * ext, 0.8 * ext) for _ in range(4)]

    span = rng.uniform((), 4.0, 12.0)
    z_lo = rng.uniform((), 0.1 * z_ext, 0.9 * z_ext - span)
    z_ctrl = [z_lo + rng.uniform((), 0.0, span) for _ in range(4)]

    run_ext = x_ext if dominant == 0 else y_ext
    n = 4 * (run_ext + 4)
    t = np.linspace(0.0, 1.0, n)
    run = -2.0 + (run_ext + 4.0) * t
    other = _bezier(t, *ctrl(y_ext if dominant == 0 else x_ext))
    zs = _bezier(t, *z_ctrl)
    xs, ys = (run, other) if dominant == 0 else (other, run)

    r_int = int(np.ceil(radius))
    off = np.arange(-r_int, r_int + 1)
    oz, oy, ox = np.meshgrid(off, off, off, indexing="ij")
    for cx, cy, cz in zip(xs, ys, zs):
        ix, iy, iz = int(round(cx)), int(round(cy)), int(round(cz))
        vx, vy, vz = ix + ox, iy + oy, iz + oz
        d2 = (vx - cx) ** 2 + (vy - cy) ** 2 + (vz - cz) ** 2
        ok = (d2 <= radius ** 2) & (vx >= 0) & (vx < x_ext) & \
             (vy >= 0) & (vy < y_ext) & (vz >= 0) & (vz < z_ext)
        label[vz[ok], vy[ok], vx[ok]] = 1


def gen_phantom(seed: int, extents=(64, 64, 64),
                spacing: tuple = DEFAULT_SPACING) -> Case:
    """Deterministic bimodal thin-pathway phantom.

    The label is the union of 2-4 real tubes (radius 1-3 voxels) along
    smooth curves crossing the volume: structures that are both
    tube-shaped in T1w (+0.15 over the local background) and FA-hot
    (0.7-1.0 against 0-0.2 noise). Two distractor families break the
    single-modality shortcuts: distractor tubes share the T1w tube
    appearance but stay FA-cold, and smooth FA-hot blobs share the FA
    signature but are not tubes (flat in T1w). Segmenting the label
    therefore requires the tube-shape-AND-FA-hot conjunction, i.e.
    fusing both modalities.
    """
    x_ext, y_ext, z_ext = extents
    if min(extents) < 16:
        raise DataError(f"phantom extents must be >= 16 per axis, got {extents}")
    rng = DetRng(seed)
    shape_zyx = (z_ext, y_ext, x_ext)

    label = np.zeros(shape_zyx, dtype=np.uint8)
    for _ in range(rng.integers(2, 5)):
        _stamp_tube(label, rng, extents)
    fg = label.astype(bool)

    distract = np.zeros(shape_zyx, dtype=np.uint8)
    for _ in range(rng.integers(2, 5)):
        _stamp_tube(distract, rng, extents)
    dg = distract.astype(bool) & ~fg  # real tubes win where they overlap

    fa = rng.uniform(shape_zyx, 0.0, 0.2).astype(np.float32)
    fa[fg] = rng.uniform((int(fg.sum()),), 0.7, 1.0).astype(np.float32)

    zz, yy, xx = np.meshgrid(np.arange(z_ext, dtype=np.float32),
                             np.arange(y_ext, dtype=np.float32),
                             np.arange(x_ext, dtype=np.float32), indexing="ij")
    bg = np.zeros(shape_zyx, dtype=np.float32)
    for _ in range(rng.integers(3, 7)):
        cx = rng.uniform((), 0.0, x_ext)
        cy = rng.uniform((), 0.0, y_ext)
        cz = rng.uniform((), 0.0, z_ext)
        sig = rng.uniform((), x_ext / 6.0, x_ext / 3.0)
        amp = rng.uniform((), 0.5, 1.0)
        bg += np.float32(amp) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2)
                                       / np.float32(2.0 * sig * sig))
    lo, hi = float(bg.min()), float(bg.max())
    t1w = (0.2 + 0.6 * (bg - lo) / max(hi - lo, 1e-6)).astype(np.float32)
    t1w[fg | dg] += 0.15
    t1w += rng.uniform(shape_zyx, -0.03, 0.03).astype(np.float32)
    t1w = np.clip(t1w, 0.0, 1.0)

    blobs = np.zeros(shape_zyx, dtype=bool)
    for _ in range(rng.integers(4, 8)):
        cx = rng.uniform((), 0.1 * x_ext, 0.9 * x_ext)
        cy = rng.uniform((), 0.1 * y_ext, 0.9 * y_ext)
        cz = rng.uniform((), 0.1 * z_ext, 0.9 * z_ext)
        rad = rng.uniform((), 0.10 * x_ext, 0.22 * x_ext)
        blobs |= ((xx - cx) ** 2 + (yy - cy) ** 2 +
                  ((zz - cz) * 2.0) ** 2) <= rad * rad
    hot = blobs & ~fg & ~dg
    fa[hot] = rng.uniform((int(hot.sum()),), 0.7, 1.0).astype(np.float32)

    return Case(id=f"seed{seed}",
                t1w=Volume(t1w, spacing),
                fa=Volume(fa, spacing),
                label=Volume(label, spacing))


def gen_dataset(out_dir, n_cases: int, size: int = 64, seed: int = 0,
                spacing: tuple = DEFAULT_SPACING) -> list:
    """Write n_cases phantoms under out_dir/<id>/{t1w,fa,label}.mvol."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n_cases):
        case = gen_phantom(hash_seeds(seed, i), (size, size, size), spacing)
        case.id = f"case{i:03d}"
        save_case(case, out)
        ids.append(case.id)
    return ids


# ---------------------------------------------------------------------------
# splitting and slicing
# ---------------------------------------------------------------------------

def split_cases(case_ids, seed: int, ratio=(8, 1, 1)) -> SplitSpec:
    """Seeded shuffle then partition; val/test get round(n * r / sum) each,
    at least 1, and train takes the rest."""
    n = len(case_ids)
    if n < 10:
        raise DataError(f"need at least 10 cases to split, got {n}")
    total = sum(ratio)
    n_val = max(1, int(n * ratio[1] / total + 0.5))
    n_test = max(1, int(n * ratio[2] / total + 0.5))
    if n_val + n_test >= n:
        raise DataError("split leaves no training cases")
    shuffled = DetRng(hash_seeds(seed, 0x5917)).shuffled(sorted(case_ids))
    return SplitSpec(train=shuffled[: n - n_val - n_test],
                     val=shuffled[n - n_val - n_test: n - n_test],
                     test=shuffled[n - n_test:],
                     seed=seed, ratio=tuple(ratio))


def save_split(spec: SplitSpec, path):
    payload = {"train": spec.train, "val": spec.val, "test": spec.test, "seed": spec.seed}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_split(path) -> SplitSpec:
    try:
        payload = json.loads(Path(path).read_text())
        return SplitSpec(train=payload["train"], val=payload["val"],
                         test=payload["test"], seed=payload["seed"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split file {path}: {exc}") from exc


def extract_slices(case: Case, keep_empty_fraction: float = 0.1) -> list:
    """Axial (t1w, fa, label) 2D triples, z-ordered.

    All slices with a non-empty label are kept; of the empty ones, every
    round(1/fraction)-th is kept (none for fraction 0, all for 1).
    """
    out = []
    n_empty = 0
    stride = None if keep_empty_fraction <= 0 else max(1, int(round(1.0 / keep_empty_fraction)))
    for z in range(case.label.voxels.shape[0]):
        lab = case.label.voxels[z]
        if lab.any():
            out.append((case.t1w.voxels[z], case.fa.voxels[z], lab))
        else:
            if stride is not None and n_empty % stride == 0:
                out.append((case.t1w.voxels[z], case.fa.voxels[z], lab))
            n_empty += 1
    return out


# ---------------------------------------------------------------------------
# MVOL file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sI3I3fB")  # magic, version, extents xyz, spacing xyz, dtype


def write_mvol(vol: Volume, path):
    """Serialize losslessly: 33-byte header, then voxels x-fastest."""
    if vol.voxels.dtype == np.uint8:
        code, payload = DTYPE_U8, vol.voxels.tobytes()
    else:
        code, payload = DTYPE_F32, np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes()
    x, y, z = vol.extents
    header = _HEADER.pack(MVOL_MAGIC, MVOL_VERSION, x, y, z,
                          vol.spacing[0], vol.spacing[1], vol.spacing[2], code)
    Path(path).write_bytes(header + payload)


def read_mvol(path) -> Volume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if len(raw) < 4 or raw[:4] != MVOL_MAGIC:
        raise MvolBadMagic(f"{path}: not an MVOL file")
    if len(raw) < _HEADER.size:
        raise MvolTruncated(f"{path}: header cut short at {len(raw)} bytes")
    magic, version, x, y, z, sx, sy, sz, code = _HEADER.unpack_from(raw)
    if version != MVOL_VERSION:
        raise MvolBadVersion(f"{path}: unsupported version {version}")
    if code == DTYPE_F32:
        dtype, itemsize = np.dtype("<f4"), 4
    elif code == DTYPE_U8:
        dtype, itemsize = np.dtype(np.uint8), 1
    else:
        raise MvolBadDtype(f"{path}: unknown dtype code {code}")
    expect = x * y * z * itemsize
    body = raw[_HEADER.size:]
    if len(body) != expect:
        raise MvolTruncated(f"{path}: expected {expect} data bytes, found {len(body)}")
    voxels = np.frombuffer(body, dtype=dtype).reshape(z, y, x)
    if code == DTYPE_F32:
        voxels = voxels.astype(np.float32)
    else:
        voxels = voxels.copy()
    return Volume(voxels, (sx, sy, sz))


def save_case(case: Case, root):
    d = Path(root) / case.id
    d.mkdir(parents=True, exist_ok=True)
    write_mvol(case.t1w, d / "t1w.mvol")
    write_mvol(case.fa, d / "fa.mvol")
    write_mvol(case.label, d / "label.mvol")


def load_case(root, case_id: str) -> Case:
    d = Path(root) / case_id
    if not d.is_dir():
        raise DataError(f"no case directory {d}")
    return Case(id=case_id,
                t1w=read_mvol(d / "t1w.mvol"),
                fa=read_mvol(d / "fa.mvol"),
                label=read_mvol(d / "label.mvol"))


def list_cases(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"no dataset directory {root}")
    ids = sorted(p.name for p in root.iterdir() if (p / "t1w.mvol").is_file())
    if not ids:
        raise DataError(f"no cases found under {root}")
    return ids
