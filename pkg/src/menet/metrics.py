"""Segmentation quality metrics: DSC, RAVD, Hausdorff and ASSD.

Surface metrics use brute-force nearest-neighbour search (chunked over rows
to bound memory, never approximated). To keep results bit-reproducible the
distance between two surface points is always evaluated the same way:
float64 coordinates premultiplied by spacing, then
sqrt(dx*dx + dy*dy + dz*dz) summed in x, y, z order.
"""

from dataclasses import dataclass, field

import numpy as np


class UndefinedMetric(Exception):
    """Raised when a metric has no defined value for the given masks."""


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class SurfaceSet:
    """Boundary voxel centers of a mask, in mm (columns x, y, z)."""
    points: np.ndarray
    spacing: tuple

    def __len__(self):
        return len(self.points)


@dataclass
class MetricReport:
    """Per-case results; a metric that is undefined holds None and an entry
    in `undefined` explaining why. dsc is a fraction, ravd a percent, hd and
    assd are mm."""
    dsc: float = None
    ravd: float = None
    hd: float = None
    assd: float = None
    undefined: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {"dsc": self.dsc, "ravd": self.ravd, "hd": self.hd, "assd": self.assd}


def _as_mask(arr: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 3:
        raise ValueError(f"{name} must be a 3D mask, got shape {a.shape}")
    vals = np.unique(a)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary, found values {vals[:5]}")
    return a.astype(bool)


def _check_pair(pred, gt):
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def confusion(pred, gt) -> ConfusionCounts:
    p, g = _check_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=p.size - tp - fp - fn)


def dsc(counts: ConfusionCounts) -> float:
    """Dice overlap 2TP / (2TP + FP + FN); two empty masks agree perfectly."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def dsc_masks(pred, gt) -> float:
    return dsc(confusion(pred, gt))


def ravd(pred, gt) -> float:
    """Relative absolute volume difference |V_pred / V_gt - 1| * 100, percent."""
    p, g = _check_pair(pred, gt)
    vg = int(np.count_nonzero(g))
    if vg == 0:
        raise UndefinedMetric("ravd: reference mask is empty")
    return abs(int(np.count_nonzero(p)) / vg - 1.0) * 100.0


def surface(mask, spacing) -> SurfaceSet:
    """Foreground voxels with a 6-neighbourhood background contact. Outside
    the volume counts as background, so objects touching the edge contribute
    surface there. Point coordinates are voxel indices times spacing."""
    m = _as_mask(mask, "mask")
    sx, sy, sz = (float(s) for s in spacing)
    if min(sx, sy, sz) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    pad = np.pad(m, 1, constant_values=False)
    core = np.ones_like(m)
    core &= pad[:-2, 1:-1, 1:-1] & pad[2:, 1:-1, 1:-1]
    core &= pad[1:-1, :-2, 1:-1] & pad[1:-1, 2:, 1:-1]
    core &= pad[1:-1, 1:-1, :-2] & pad[1:-1, 1:-1, 2:]
    zz, yy, xx = np.nonzero(m & ~core)
    pts = np.empty((len(zz), 3), dtype=np.float64)
    pts[:, 0] = xx.astype(np.float64) * sx
    pts[:, 1] = yy.astype(np.float64) * sy
    pts[:, 2] = zz.astype(np.float64) * sz
    return SurfaceSet(points=pts, spacing=(sx, sy, sz))


def _nearest_dists(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact distance from each point of a to its nearest point of b."""
    out = np.empty(len(a), dtype=np.float64)
    for lo in range(0, len(a), chunk):
        blk = a[lo: lo + chunk]
        dx = blk[:, 0:1] - b[None, :, 0]
        dy = blk[:, 1:2] - b[None, :, 1]
        dz = blk[:, 2:3] - b[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        out[lo: lo + chunk] = np.sqrt(np.min(d2, axis=1))
    return out


def _require(a: SurfaceSet, b: SurfaceSet, metric: str):
    if len(a) == 0:
        raise UndefinedMetric(f"{metric}: first surface set is empty")
    if len(b) == 0:
        raise UndefinedMetric(f"{metric}: second surface set is empty")


def hausdorff(a: SurfaceSet, b: SurfaceSet) -> float:
    """Symmetric Hausdorff distance in mm: max of the two directed
    max-over-min surface distances."""
    _require(a, b, "hd")
    return max(float(np.max(_nearest_dists(a.points, b.points))),
               float(np.max(_nearest_dists(b.points, a.points))))


def assd(a: SurfaceSet, b: SurfaceSet) -> float:
    """Average symmetric surface distance in mm: nearest-surface distances
    from both directions, pooled then averaged."""
    _require(a, b, "assd")
    d_ab = _nearest_dists(a.points, b.points)
    d_ba = _nearest_dists(b.points, a.points)
    return float((np.sum(d_ab) + np.sum(d_ba)) / (len(a) + len(b)))


def report(pred, gt, spacing) -> MetricReport:
    """All four metrics for a mask pair; undefined ones are recorded in the
    report instead of raised, so batch evaluation never aborts."""
    rep = MetricReport()
    rep.dsc = dsc(confusion(pred, gt))
    try:
        rep.ravd = ravd(pred, gt)
    except UndefinedMetric as exc:
        rep.undefined["ravd"] = str(exc)
    sp = surface(pred, spacing)
    sg = surface(gt, spacing)
    for name, fn in (("hd", hausdorff), ("assd", assd)):
        try:
            setattr(rep, name, fn(sp, sg))
        except UndefinedMetric as exc:
            rep.undefined[name] = str(exc)
    return rep
