"""Training loop, evaluation over splits and the menet-vs-baseline ablation.

Optimization is adaptive-moment estimation with decoupled weight decay at a
constant learning rate. Every stochastic choice (batch order, epoch
subsampling) derives from the run seed, so a (config, seed, dataset) triple
fully determines the produced checkpoint and records.
"""

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import data as D
from . import losses
from . import metrics as ME
from . import model as M
from .data import DataError
from .rng import DetRng, hash_seeds
from .tensor import NARROW, ParamStore, Tensor, backward

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(Exception):
    """Non-finite loss or gradient during training (CLI exit code 3)."""


@dataclass
class TrainConfig:
    """Full-scale defaults; desk runs override epochs/batch/lr."""
    epochs: int = 200
    batch_size: int = 40
    learning_rate: float = 0.00015
    weight_decay: float = 0.00001
    seed: int = 0
    model: M.MeNetConfig = field(default_factory=M.MeNetConfig)
    slices_per_epoch: int = 0  # 0 = use every kept slice each epoch
    keep_empty_fraction: float = 0.1
    threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = M.MeNetConfig.from_dict(self.model)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile: 30 epochs, batch 8, 64x64 slices."""
        base = dict(epochs=30, batch_size=8, learning_rate=0.001,
                    slices_per_epoch=192)
        base.update(overrides)
        return cls(**base)


class OptimizerState:
    """First/second moment accumulators per parameter plus a step counter."""

    def __init__(self, store: ParamStore):
        self.m = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in store.items()}
        self.step_count = 0

    def step(self, store: ParamStore, lr: float, weight_decay: float):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - BETA1 ** t
        bc2 = 1.0 - BETA2 ** t
        for name, p in store.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[name] = BETA1 * self.m[name] + (1.0 - BETA1) * g
            v = self.v[name] = BETA2 * self.v[name] + (1.0 - BETA2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class RunRecord:
    config: dict
    seed: int
    train_loss: list = field(default_factory=list)
    val_dsc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_dsc: float = -1.0
    test: dict = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def _load_split(data_dir) -> D.SplitSpec:
    path = Path(data_dir) / "split.json"
    if not path.is_file():
        raise DataError(f"no split file at {path}; run the split command first")
    return D.load_split(path)


def _gather_slices(data_dir, ids, keep_empty_fraction) -> list:
    out = []
    for cid in ids:
        case = D.load_case(data_dir, cid)
        out.extend(D.extract_slices(case, keep_empty_fraction))
    return out


def _slice_tensors(sl):
    t1w, fa, lab = sl
    return (Tensor(t1w[None, :, :].astype(NARROW)),
            Tensor(fa[None, :, :].astype(NARROW)),
            Tensor(lab[None, :, :].astype(NARROW)))


def _batch_loss(params: M.MeNetParams, batch) -> Tensor:
    """Mean of the per-slice total losses, as one graph."""
    total = None
    for sl in batch:
        t1w, fa, lab = _slice_tensors(sl)
        probs = M.forward(params, t1w, fa).probabilities
        terms = losses.total_loss(probs, lab)
        total = terms.total if total is None else total + terms.total
    return total * (1.0 / len(batch))


def _val_dsc(params: M.MeNetParams, val_slices, threshold: float) -> float:
    """Aggregate-count Dice over all validation slices."""
    tp = fp = fn = 0
    with M._inference(params.store):
        for sl in val_slices:
            t1w, fa, lab = _slice_tensors(sl)
            probs = M.forward(params, t1w, fa).probabilities.data
            pred = probs > threshold
            gt = lab.data > 0.5
            tp += int(np.count_nonzero(pred & gt))
            fp += int(np.count_nonzero(pred & ~gt))
            fn += int(np.count_nonzero(~pred & gt))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def _snapshot(store: ParamStore) -> dict:
    return {name: t.data.copy() for name, t in store.items()}


def _restore(params: M.MeNetParams, snap: dict) -> M.MeNetParams:
    store = ParamStore()
    for name in params.store.names():
        store.add(name, snap[name].copy())
    return M.MeNetParams(config=params.config, store=store)


def train(cfg: TrainConfig, data_dir, out_dir=None, log=None) -> tuple:
    """Returns (RunRecord, best MeNetParams); writes checkpoint.mnck and
    record.json under out_dir when given."""
    split = _load_split(data_dir)
    train_slices = _gather_slices(data_dir, split.train, cfg.keep_empty_fraction)
    val_slices = _gather_slices(data_dir, split.val, cfg.keep_empty_fraction)
    if cfg.batch_size > len(train_slices):
        raise DataError(f"batch size {cfg.batch_size} exceeds "
                        f"{len(train_slices)} training slices")

    params = M.init(cfg.model, cfg.seed)
    opt = OptimizerState(params.store)
    record = RunRecord(config=cfg.to_dict(), seed=cfg.seed)
    best_snap = _snapshot(params.store)
    best_dsc, best_epoch = -1.0, -1

    for epoch in range(cfg.epochs):
        order = DetRng(hash_seeds(cfg.seed, 0xE90C, epoch)).permutation(len(train_slices))
        if cfg.slices_per_epoch > 0:
            order = order[: cfg.slices_per_epoch]
        n_batches = len(order) // cfg.batch_size
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size: (b + 1) * cfg.batch_size]
            batch = [train_slices[i] for i in idx]
            params.store.zero_grad()
            loss = _batch_loss(params, batch)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            backward(loss, params.store)
            opt.step(params.store, cfg.learning_rate, cfg.weight_decay)
            epoch_loss += loss_val
        record.train_loss.append(epoch_loss / max(n_batches, 1))

        vdsc = _val_dsc(params, val_slices, cfg.threshold)
        record.val_dsc.append(vdsc)
        if vdsc > best_dsc:
            best_dsc, best_epoch = vdsc, epoch
            best_snap = _snapshot(params.store)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}  loss {record.train_loss[-1]:.4f}  "
                f"val dsc {vdsc:.4f}")

    record.best_epoch, record.best_val_dsc = best_epoch, best_dsc
    best_params = _restore(params, best_snap)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.save_checkpoint(best_params, out / "checkpoint.mnck")
        (out / "record.json").write_text(record.to_json() + "\n")
    return record, best_params


def evaluate(params: M.MeNetParams, data_dir, split_name: str = "test",
             threshold: float = 0.5, oracle: bool = False) -> dict:
    """Per-case metric reports plus mean/std over the defined values.

    oracle=True scores the ground truth against itself (harness self-check).
    """
    split = _load_split(data_dir)
    ids = getattr(split, split_name, None)
    if ids is None:
        raise DataError(f"unknown split {split_name!r}")
    cases = {}
    for cid in ids:
        case = D.load_case(data_dir, cid)
        if oracle:
            mask = case.label
        else:
            mask = M.predict_volume(params, case, threshold)
        rep = ME.report(mask.voxels, case.label.voxels, case.label.spacing)
        cases[cid] = {"values": rep.values(), "undefined": rep.undefined}

    mean, std, undefined_counts = {}, {}, {}
    for metric in ("dsc", "ravd", "hd", "assd"):
        vals = [c["values"][metric] for c in cases.values()
                if c["values"][metric] is not None]
        undefined_counts[metric] = len(cases) - len(vals)
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            mean[metric] = float(np.mean(arr))
            std[metric] = float(np.std(arr))
        else:
            mean[metric] = None
            std[metric] = None
    return {"split": split_name, "n_cases": len(cases), "cases": cases,
            "mean": mean, "std": std, "undefined_counts": undefined_counts}


def evaluate_checkpoint(checkpoint_path, data_dir, split_name="test",
                        threshold=0.5, oracle=False) -> dict:
    return evaluate(M.load_checkpoint(checkpoint_path), data_dir, split_name,
                    threshold, oracle)


def _fmt_cell(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def ablation_table(result: dict) -> str:
    """Two model rows, four metric columns, plus the delta row."""
    cols = ("dsc", "ravd", "hd", "assd")
    lines = ["model     " + "".join(f"{c:>12}" for c in cols)]
    for variant in ("menet", "baseline"):
        mean = result[variant]["mean"]
        lines.append(f"{variant:<10}" + "".join(f"{_fmt_cell(mean[c]):>12}" for c in cols))
    delta = result["delta"]
    lines.append("delta     " + "".join(f"{_fmt_cell(delta[c]):>12}" for c in cols))
    return "\n".join(lines)


def ablate(cfg: TrainConfig, data_dir, seeds, out_dir=None, log=None) -> dict:
    """Train menet and baseline with identical configs per seed; aggregate
    test metrics per variant and report menet-minus-baseline deltas."""
    rows = []
    per_variant = {"menet": [], "baseline": []}
    for seed in seeds:
        for variant in ("menet", "baseline"):
            model_cfg = M.MeNetConfig(**{**cfg.model.to_dict(), "variant": variant})
            run_cfg = TrainConfig(**{**cfg.to_dict(), "seed": seed,
                                     "model": model_cfg.to_dict()})
            if log:
                log(f"--- {variant} seed {seed}")
            _, best = train(run_cfg, data_dir, log=log)
            ev = evaluate(best, data_dir, "test", cfg.threshold)
            per_variant[variant].append(ev)
            rows.append({"model": variant, "seed": seed, **ev["mean"]})

    result = {"seeds": list(seeds), "rows": rows}
    for variant, evs in per_variant.items():
        agg = {}
        for metric in ("dsc", "ravd", "hd", "assd"):
            vals = [e["mean"][metric] for e in evs if e["mean"][metric] is not None]
            agg[metric] = float(np.mean(vals)) if vals else None
        result[variant] = {"mean": agg, "per_seed": [e["mean"] for e in evs]}
    result["delta"] = {
        metric: None if result["menet"]["mean"][metric] is None
        or result["baseline"]["mean"][metric] is None
        else result["menet"]["mean"][metric] - result["baseline"]["mean"][metric]
        for metric in ("dsc", "ravd", "hd", "assd")}

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(
            json.dumps(result, sort_keys=True, separators=(",", ":")) + "\n")
        (out / "ablation.csv").write_text(ablation_csv(rows))
    return result


def ablation_csv(rows) -> str:
    lines = ["model,seed,dsc,ravd,hd,assd"]
    for r in rows:
        cells = [r["model"], str(r["seed"])] + [
            "undefined" if r[m] is None else repr(r[m])
            for m in ("dsc", "ravd", "hd", "assd")]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
