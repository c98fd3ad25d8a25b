"""Acceptance gate: nine checks, each printing one PASS/FAIL line.

Run with plain pytest; the status lines bypass output capture so the gate's
verdict is always visible. The two training checks (overfit and ablation)
dominate the runtime; everything else finishes in seconds.
"""

import json
import math
import time

import numpy as np
import pytest

from menet import cli
from menet import data as D
from menet import exchange as X
from menet import fusion as F
from menet import gradcheck as G
from menet import losses as L
from menet import metrics as ME
from menet import model as M
from menet import tensor as T
from menet import train as TR
from menet.rng import DetRng
from menet.tensor import Tensor

SEEDS = (0, 1, 2)


def _verdict(capsys, ok: bool, name: str, detail: str):
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient suite
# ---------------------------------------------------------------------------

def test_criterion_1_gradients(capsys):
    t0 = time.monotonic()
    worst_op, worst_name = 0.0, ""
    for name in sorted(G.REGISTRY):
        for seed in SEEDS:
            err = G.grad_check(name, seed=seed)
            if err > worst_op:
                worst_op, worst_name = err, name
    worst_net = max(G.model_check(seed=s) for s in SEEDS)
    elapsed = time.monotonic() - t0
    ok = worst_op < 1e-4 and worst_net < 1e-4 and elapsed < 120.0
    _verdict(capsys, ok, "criterion 1 (gradient suite)",
             f"ops worst {worst_op:.2e} ({worst_name}), whole-net worst "
             f"{worst_net:.2e}, tolerance 1e-4, {elapsed:.1f}s < 120s")


# ---------------------------------------------------------------------------
# 2. exchange invariants
# ---------------------------------------------------------------------------

def test_criterion_2_exchange(capsys):
    failures = []
    rng_shapes = DetRng(0xE0)
    for i in range(100):
        rng = DetRng(1000 + i)
        c = int(rng_shapes.integers(2, 9))
        h = int(rng_shapes.integers(2, 9))
        w = int(rng_shapes.integers(2, 9))
        pair = X.FeaturePair(t1w=Tensor(rng.normal((c, h, w))),
                             fa=Tensor(rng.normal((c, h, w))))
        aem = X.AemParams(
            eca_kernel=Tensor(0.5 * rng.normal((1, 1, X.eca_kernel_size(c)))),
            spatial_kernel=Tensor(0.5 * rng.normal((1, 2, 7, 7))),
            spatial_bias=Tensor(0.5 * rng.normal((1,))))

        fem_c = X.fem_coefficients(X.simam_energy(X.overlay(pair)))
        aem_c = X.aem_coefficients(X.overlay(pair), aem)
        if np.max(np.abs(fem_c.f_t1w.data + fem_c.f_fa.data - 1.0)) > 1e-12:
            failures.append(f"pair {i}: FEM coefficients do not sum to 1")
        if np.max(np.abs(aem_c.f_t1w.data + aem_c.f_fa.data - 1.0)) > 1e-12:
            failures.append(f"pair {i}: AEM coefficients do not sum to 1")
        if not (np.all(fem_c.f_t1w.data > 0.5) and np.all(fem_c.f_t1w.data < 1.0)):
            failures.append(f"pair {i}: FEM f_t1w outside (0.5, 1)")

        const = X.simam_energy(Tensor(np.full((c, h, w), float(rng.uniform()))))
        if np.max(np.abs(const.e.data - 2.0)) > 1e-9:
            failures.append(f"pair {i}: constant-channel energy != 2")

        same = rng.normal((c, h, w))
        eq_pair = X.FeaturePair(t1w=Tensor(same), fa=Tensor(same.copy()))
        if not np.array_equal(X.fem_exchange(eq_pair).data, same):
            failures.append(f"pair {i}: FEM not identity on equal pair")
        if not np.array_equal(X.aem_exchange(eq_pair, aem).data, same):
            failures.append(f"pair {i}: AEM not identity on equal pair")

        lo = np.minimum(pair.t1w.data, pair.fa.data)
        hi = np.maximum(pair.t1w.data, pair.fa.data)
        for label, out in (("FEM", X.fem_exchange(pair).data),
                           ("AEM", X.aem_exchange(pair, aem).data)):
            if not (np.all(out >= lo) and np.all(out <= hi)):
                failures.append(f"pair {i}: {label} left the elementwise interval")
    ok = not failures
    _verdict(capsys, ok, "criterion 2 (exchange invariants)",
             "100 random pairs: coefficient sums within 1e-12, FEM in (0.5,1), "
             "constant energy = 2 within 1e-9, identity on equal pairs, "
             "outputs inside elementwise interval"
             if ok else "; ".join(failures[:3]))


# ---------------------------------------------------------------------------
# 3. attention invariants
# ---------------------------------------------------------------------------

def test_criterion_3_attention(capsys):
    failures = []
    for seed in range(10):
        rng = DetRng(seed)
        n, d = int(rng.integers(2, 12)), int(rng.integers(2, 8))
        q, k, v = (Tensor(rng.normal((n, d))) for _ in range(3))
        scores = T.matmul(q, T.transpose(k, (1, 0))) * (1.0 / d ** 0.5)
        rows = T.softmax(scores, axis=-1).data.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-6:
            failures.append(f"seed {seed}: attention row sums off by "
                            f"{np.max(np.abs(rows - 1.0)):.1e}")

    rng = DetRng(77)
    q1, k1, v1 = (Tensor(rng.normal((1, 5))) for _ in range(3))
    if not np.array_equal(F.cross_attention(q1, k1, v1).data, v1.data):
        failures.append("single-token attention does not return V exactly")

    rng = DetRng(78)
    q, k, v = (Tensor(rng.normal((12, 6))) for _ in range(3))
    base = F.cross_attention(q, k, v).data
    for i in range(50):
        perm = DetRng(200 + i).permutation(12)
        pq, pk, pv = (Tensor(t.data[perm]) for t in (q, k, v))
        if not np.allclose(F.cross_attention(pq, pk, pv).data, base[perm], atol=1e-12):
            failures.append(f"permutation {i}: equivariance violated")
    ok = not failures
    _verdict(capsys, ok, "criterion 3 (attention invariants)",
             "row sums within 1e-6, single token returns V exactly, "
             "50 permutations equivariant within 1e-12"
             if ok else "; ".join(failures[:3]))


# ---------------------------------------------------------------------------
# 4. metric oracle equivalence
# ---------------------------------------------------------------------------

def _oracle_nearest(src, dst):
    dists = []
    for p in src:
        best = math.inf
        for q in dst:
            dx, dy, dz = p[0] - q[0], p[1] - q[1], p[2] - q[2]
            best = min(best, math.sqrt(dx * dx + dy * dy + dz * dz))
        dists.append(best)
    return dists


def test_criterion_4_metric_oracles(capsys):
    t0 = time.monotonic()
    failures = []
    spacing = (1.25, 1.25, 1.25)
    for i in range(50):
        rng = DetRng(3000 + i)
        shape = tuple(int(rng.integers(4, 17)) for _ in range(3))
        a = (rng.uniform(shape) > 0.85).astype(np.uint8)
        b = (rng.uniform(shape) > 0.85).astype(np.uint8)
        if not a.any():
            a[tuple(s // 2 for s in shape)] = 1
        if not b.any():
            b[0, 0, 0] = 1

        c = ME.confusion(a, b)
        denom = 2 * c.tp + c.fp + c.fn
        dsc_oracle = 1.0 if denom == 0 else 2.0 * c.tp / denom
        if ME.dsc_masks(a, b) != dsc_oracle:
            failures.append(f"pair {i}: dsc != count oracle")
        ravd_oracle = abs(int(a.sum()) / int(b.sum()) - 1.0) * 100.0
        if ME.ravd(a, b) != ravd_oracle:
            failures.append(f"pair {i}: ravd != count oracle")

        sa, sb = ME.surface(a, spacing), ME.surface(b, spacing)
        d_ab = _oracle_nearest(sa.points.tolist(), sb.points.tolist())
        d_ba = _oracle_nearest(sb.points.tolist(), sa.points.tolist())
        hd_oracle = max(max(d_ab), max(d_ba))
        assd_oracle = float((np.sum(np.asarray(d_ab)) + np.sum(np.asarray(d_ba)))
                            / (len(d_ab) + len(d_ba)))
        if ME.hausdorff(sa, sb) != hd_oracle:
            failures.append(f"pair {i}: hd != brute-force oracle")
        if ME.assd(sa, sb) != assd_oracle:
            failures.append(f"pair {i}: assd != brute-force oracle")

        s2 = tuple(2.0 * s for s in spacing)
        if ME.hausdorff(ME.surface(a, s2), ME.surface(b, s2)) != 2.0 * ME.hausdorff(sa, sb):
            failures.append(f"pair {i}: hd spacing scaling inexact")
        if ME.assd(ME.surface(a, s2), ME.surface(b, s2)) != 2.0 * ME.assd(sa, sb):
            failures.append(f"pair {i}: assd spacing scaling inexact")

    gt = np.zeros((1, 4, 4), dtype=np.uint8)
    gt[0, 0, 0] = gt[0, 0, 1] = gt[0, 1, 0] = gt[0, 1, 1] = 1
    pred = np.zeros_like(gt)
    pred[0, 0, 0] = pred[0, 0, 1] = pred[0, 3, 3] = 1
    if ME.dsc_masks(pred, gt) != 4.0 / 7.0:
        failures.append("hand 4x4x1 case: dsc != 4/7")

    elapsed = time.monotonic() - t0
    ok = not failures and elapsed < 60.0
    _verdict(capsys, ok, "criterion 4 (metric oracles)",
             f"50 random pairs equal brute-force/count oracles exactly, "
             f"4x4x1 dsc = 4/7, spacing law exact, {elapsed:.1f}s < 60s"
             if ok else "; ".join(failures[:3]) or f"too slow: {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. loss checks
# ---------------------------------------------------------------------------

def test_criterion_5_losses(capsys):
    failures = []
    pred = Tensor(np.full(16, 0.5))
    label = Tensor((np.arange(16) % 3 == 0).astype(np.float64))
    bce = L.bce_loss(pred, label).item()
    if abs(bce - math.log(2.0)) > 1e-9:
        failures.append(f"bce at 0.5 is {bce!r}, want ln 2")

    y = (np.arange(20) % 4 == 0).astype(np.float64)
    perfect = L.total_loss(Tensor(y.copy()), Tensor(y)).total.item()
    if perfect > 2e-7:
        failures.append(f"perfect-prediction loss {perfect:.2e} > 2e-7")

    dice = L.dice_loss(Tensor(np.full(4, 0.5)),
                       Tensor(np.array([1.0, 1.0, 0.0, 0.0]))).item()
    if dice != 0.4:
        failures.append(f"soft-dice N=4,k=2 case is {dice!r}, want exactly 0.4")
    ok = not failures
    _verdict(capsys, ok, "criterion 5 (loss checks)",
             "bce(0.5) = ln 2 within 1e-9, perfect prediction <= 2e-7, "
             "N=4,k=2 dice = 0.4 exactly" if ok else "; ".join(failures))


# ---------------------------------------------------------------------------
# 6. overfit sanity
# ---------------------------------------------------------------------------

def test_criterion_6_overfit(capsys, tmp_path):
    t0 = time.monotonic()
    src = D.gen_phantom(11, (64, 64, 64))
    nz = [z for z in range(64) if src.label.voxels[z].any()]
    zs = [nz[len(nz) // 3], nz[2 * len(nz) // 3]]
    case = D.Case(id="case000",
                  t1w=D.Volume(src.t1w.voxels[zs], src.t1w.spacing),
                  fa=D.Volume(src.fa.voxels[zs], src.fa.spacing),
                  label=D.Volume(src.label.voxels[zs], src.label.spacing))
    D.save_case(case, tmp_path)
    D.save_split(D.SplitSpec(train=["case000"], val=["case000"],
                             test=["case000"], seed=0), tmp_path / "split.json")
    cfg = TR.TrainConfig(
        epochs=300, batch_size=2, learning_rate=1e-3, weight_decay=1e-5, seed=0,
        keep_empty_fraction=1.0,
        model=M.MeNetConfig(levels=2, base_channels=8, height=64, width=64))
    record, _ = TR.train(cfg, tmp_path)
    elapsed = time.monotonic() - t0

    ratio = record.train_loss[-1] / record.train_loss[0]
    ok = ratio <= 0.2 and record.best_val_dsc >= 0.95 and elapsed < 300.0
    _verdict(capsys, ok, "criterion 6 (overfit sanity)",
             f"2 slices, 300 steps: loss {record.train_loss[0]:.4f} -> "
             f"{record.train_loss[-1]:.4f} (ratio {ratio:.3f} <= 0.2), "
             f"train dsc {record.best_val_dsc:.4f} >= 0.95, {elapsed:.0f}s < 300s")


# ---------------------------------------------------------------------------
# 7. desk-scale ablation
# ---------------------------------------------------------------------------

ABLATION_DATA_SEED = 7
ABLATION_EPOCHS = 30
ABLATION_BATCH_SIZE = 4
ABLATION_SLICES_PER_EPOCH = 128


def test_criterion_7_ablation(capsys, tmp_path):
    t0 = time.monotonic()
    ids = D.gen_dataset(tmp_path, n_cases=40, size=64, seed=ABLATION_DATA_SEED)
    D.save_split(D.split_cases(ids, seed=ABLATION_DATA_SEED), tmp_path / "split.json")
    cfg = TR.TrainConfig.desk(
        epochs=ABLATION_EPOCHS, batch_size=ABLATION_BATCH_SIZE,
        slices_per_epoch=ABLATION_SLICES_PER_EPOCH, weight_decay=1e-5,
        model=M.MeNetConfig(levels=3, base_channels=8, height=64, width=64))
    result = TR.ablate(cfg, tmp_path, SEEDS, out_dir=tmp_path / "ablation")
    elapsed = time.monotonic() - t0

    per_seed = {v: [e["dsc"] for e in result[v]["per_seed"]]
                for v in ("menet", "baseline")}
    wins = sum(m >= b for m, b in zip(per_seed["menet"], per_seed["baseline"]))
    mean_dsc = result["menet"]["mean"]["dsc"]
    ok = wins >= 2 and mean_dsc >= 0.70 and elapsed < 3600.0
    pairs = ", ".join(f"seed {s}: {m:.4f} vs {b:.4f}"
                      for s, m, b in zip(SEEDS, per_seed["menet"], per_seed["baseline"]))
    _verdict(capsys, ok, "criterion 7 (desk ablation)",
             f"menet >= baseline in {wins}/3 seeds ({pairs}); menet mean dsc "
             f"{mean_dsc:.4f} >= 0.70; {elapsed:.0f}s < 3600s")


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------

def test_criterion_8_determinism(capsys, tmp_path):
    failures = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        ids = D.gen_dataset(root / "ds", n_cases=10, size=16, seed=6)
        D.save_split(D.split_cases(ids, seed=6), root / "ds" / "split.json")
        cfg = TR.TrainConfig(
            epochs=2, batch_size=4, learning_rate=1e-3, weight_decay=1e-5,
            seed=0, slices_per_epoch=8,
            model=M.MeNetConfig(levels=2, base_channels=4, height=16, width=16))
        TR.train(cfg, root / "ds", out_dir=root / "run")
        report = TR.evaluate_checkpoint(root / "run" / "checkpoint.mnck",
                                        root / "ds", "test")
        (root / "report.json").write_text(
            json.dumps(report, sort_keys=True, separators=(",", ":")))

    for rel in ("ds/case000/t1w.mvol", "ds/case000/fa.mvol", "ds/case000/label.mvol",
                "ds/split.json", "run/checkpoint.mnck", "run/record.json",
                "report.json"):
        if (tmp_path / "a" / rel).read_bytes() != (tmp_path / "b" / rel).read_bytes():
            failures.append(f"{rel} differs between identical reruns")
    ok = not failures
    _verdict(capsys, ok, "criterion 8 (determinism)",
             "dataset, split, checkpoint, record and report byte-identical "
             "across reruns" if ok else "; ".join(failures))


# ---------------------------------------------------------------------------
# 9. format robustness
# ---------------------------------------------------------------------------

def test_criterion_9_format(capsys, tmp_path):
    failures = []
    rng = DetRng(9)
    vol = D.Volume(rng.uniform((6, 5, 4)).astype(np.float32), (1.0, 1.25, 2.0))
    path = tmp_path / "v.mvol"
    D.write_mvol(vol, path)
    back = D.read_mvol(path)
    if not (np.array_equal(back.voxels, vol.voxels) and back.spacing == vol.spacing):
        failures.append("float round-trip not bitwise")
    mask = D.Volume((rng.uniform((4, 4, 4)) > 0.5).astype(np.uint8))
    D.write_mvol(mask, tmp_path / "m.mvol")
    if not np.array_equal(D.read_mvol(tmp_path / "m.mvol").voxels, mask.voxels):
        failures.append("binary round-trip not bitwise")

    bad_magic = tmp_path / "magic.mvol"
    bad_magic.write_bytes(b"WXYZ" + bytes(40))
    try:
        D.read_mvol(bad_magic)
        failures.append("corrupt magic not rejected")
    except D.MvolBadMagic:
        pass
    except Exception as exc:  # noqa: BLE001 - the criterion is "designated error"
        failures.append(f"corrupt magic raised {type(exc).__name__}")

    cut = tmp_path / "cut.mvol"
    cut.write_bytes(path.read_bytes()[:-20])
    try:
        D.read_mvol(cut)
        failures.append("truncation not rejected")
    except D.MvolTruncated:
        pass
    except Exception as exc:  # noqa: BLE001
        failures.append(f"truncation raised {type(exc).__name__}")

    rc = cli.main(["metrics", "--pred", str(bad_magic), "--gt", str(bad_magic)])
    if rc != cli.EXIT_DATA:
        failures.append(f"CLI exit code {rc} for corrupt input, want {cli.EXIT_DATA}")
    ok = not failures
    _verdict(capsys, ok, "criterion 9 (format robustness)",
             "round-trips bitwise; corrupt magic and truncation raise their "
             "designated errors; CLI maps them to exit code 2"
             if ok else "; ".join(failures))
