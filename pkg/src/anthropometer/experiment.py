"""k-fold training and evaluation, error metrics and the results report."""
from __future__ import annotations

import hashlib
import json
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .mesh import HBD_NAMES, HbdVector, Manifest
from .nn import N_OUT, Network, TrainConfig, to_input, train_epoch
from .raster import read_pgm

HBD_LABELS = {
    "shoulder_width": "Shoulder width",
    "right_arm_length": "Right arm length",
    "left_arm_length": "Left arm length",
    "inseam": "Inseam/crotch height",
    "chest_circumference": "Chest circumference",
    "waist_circumference": "Waist circumference",
    "pelvis_circumference": "Pelvis circumference",
    "height": "Height",
}


class DatasetError(ValueError):
    pass


# -------------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldSplit:
    k: int
    train: tuple[np.ndarray, ...]
    eval: tuple[np.ndarray, ...]
    seed: int

    def __len__(self) -> int:
        return self.k


def kfold_split(n: int, k: int = 5, seed: int = 0,
                strata: Sequence | None = None) -> FoldSplit:
    """Seeded shuffle followed by a contiguous partition into ``k`` eval folds.

    With ``strata`` (one label per item) each stratum is shuffled and dealt
    round-robin, so every fold receives a near-equal share of each label.
    Fold sizes always differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    rng = np.random.default_rng(seed)
    if strata is None:
        evals = tuple(np.sort(c) for c in np.array_split(rng.permutation(n), k))
    else:
        labels = np.asarray(strata)
        if len(labels) != n:
            raise ValueError("strata must have one label per item")
        dealt = np.concatenate([rng.permutation(np.flatnonzero(labels == lab))
                                for lab in sorted(set(labels.tolist()))])
        evals = tuple(np.sort(dealt[j::k]) for j in range(k))
    trains = tuple(np.setdiff1d(np.arange(n), e) for e in evals)
    return FoldSplit(k, trains, evals, seed)


# ------------------------------------------------------------------ results

@dataclass
class ResultsTensor:
    """``values[j, l, 0]`` estimated and ``values[j, l, 1]`` actual HBDs (meters).

    Folds shorter than ``a`` are zero-padded; ``counts[j]`` gives the number of
    valid rows and ``indices[j, l]`` the dataset index (-1 for padding).
    """

    values: np.ndarray     # k x a x 2 x 8, float64
    counts: np.ndarray     # k
    indices: np.ndarray    # k x a, int64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        k, a = self.values.shape[:2]
        if self.values.shape != (k, a, 2, N_OUT):
            raise ValueError(f"results tensor must be k x a x 2 x 8, got {self.values.shape}")
        if self.counts.shape != (k,) or self.indices.shape != (k, a):
            raise ValueError("counts/indices do not match the results tensor")
        if (self.counts < 1).any() or (self.counts > a).any():
            raise ValueError("every fold needs between 1 and a evaluated instances")
        if not np.isfinite(self.values).all():
            raise ValueError("results tensor contains non-finite values")

    @classmethod
    def empty(cls, fold_sizes: Sequence[int]) -> ResultsTensor:
        k, a = len(fold_sizes), max(fold_sizes)
        idx = np.full((k, a), -1, dtype=np.int64)
        return cls(np.zeros((k, a, 2, N_OUT)), np.asarray(fold_sizes), idx)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def fold(self, j: int) -> np.ndarray:
        return self.values[j, : self.counts[j]]

    def save(self, path, meta: dict | None = None) -> None:
        container.save(path, "results", {"values": self.values, "counts": self.counts,
                                         "indices": self.indices}, meta)

    @classmethod
    def load(cls, path) -> tuple[ResultsTensor, dict]:
        arrays, meta = container.load(path, "results")
        return cls(arrays["values"], arrays["counts"], arrays["indices"]), meta


def _fold_errors(results: ResultsTensor, relative: bool) -> np.ndarray:
    per_fold = []
    for j in range(results.shape[0]):
        f = results.fold(j)
        est, act = f[:, 0], f[:, 1]
        if relative and (act == 0).any():
            raise ZeroDivisionError("relative error undefined for an actual value of 0")
        err = np.abs(est - act) / np.abs(act) if relative else np.abs(est - act)
        per_fold.append(err.mean(axis=0))
    return np.mean(per_fold, axis=0)


def mad(results: ResultsTensor) -> np.ndarray:
    """Per-HBD mean absolute difference in meters: mean within fold, then over folds."""
    return _fold_errors(results, relative=False)


def rpe(results: ResultsTensor) -> np.ndarray:
    """Per-HBD relative error as a fraction (multiply by 100 for percent)."""
    return _fold_errors(results, relative=True)


@dataclass
class MetricsReport:
    mad_mm: dict[str, float]
    rpe_pct: dict[str, float]
    amad_mm: float
    arpe_pct: float
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: ResultsTensor, metadata: dict | None = None) -> MetricsReport:
        m = mad(results) * 1000.0
        r = rpe(results) * 100.0
        return cls(dict(zip(HBD_NAMES, m.tolist())), dict(zip(HBD_NAMES, r.tolist())),
                   float(np.mean(m)), float(np.mean(r)), dict(metadata or {}))

    def to_json(self) -> dict:
        return {"mad_mm": self.mad_mm, "rpe_pct": self.rpe_pct, "amad_mm": self.amad_mm,
                "arpe_pct": self.arpe_pct, "metadata": self.metadata}

    @classmethod
    def from_json(cls, d: dict) -> MetricsReport:
        return cls(dict(d["mad_mm"]), dict(d["rpe_pct"]), float(d["amad_mm"]),
                   float(d["arpe_pct"]), dict(d.get("metadata", {})))

    def table_rows(self) -> list[tuple[str, str, str]]:
        rows = [(HBD_LABELS[n], f"{self.mad_mm[n]:.2f}", f"{self.rpe_pct[n]:.2f}") for n in HBD_NAMES]
        rows.append(("AMAD", f"{self.amad_mm:.2f}", ""))
        rows.append(("ARPE", "", f"{self.arpe_pct:.2f}"))
        return rows

    def to_table(self) -> str:
        head = ("HBD", "MAD (mm)", "RPE (%)")
        rows = self.table_rows()
        w0 = max(len(r[0]) for r in [head, *rows])
        w1 = max(len(r[1]) for r in [head, *rows])
        w2 = max(len(r[2]) for r in [head, *rows])
        line = "-" * (w0 + w1 + w2 + 4)

        def fmt(r):
            return f"{r[0]:<{w0}}  {r[1]:>{w1}}  {r[2]:>{w2}}".rstrip()

        body = [fmt(r) for r in rows[:-2]]
        tail = [fmt(r) for r in rows[-2:]]
        return "\n".join([line, fmt(head), line, *body, line, *tail, line]) + "\n"


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray        # N x H x W uint8
    targets: np.ndarray       # N x 8 float64, meters
    genders: list[str]
    poses: list[str]

    def __post_init__(self):
        n = len(self.ids)
        if self.images.ndim != 3 or len(self.images) != n or self.targets.shape != (n, N_OUT):
            raise DatasetError(f"inconsistent dataset: {n} ids, images {self.images.shape}, "
                               f"targets {self.targets.shape}")
        if len(self.genders) != n or len(self.poses) != n:
            raise DatasetError("genders/poses must have one entry per item")

    def __len__(self) -> int:
        return len(self.ids)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.ids).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        return h.hexdigest()


def load_hbd_json(path) -> HbdVector:
    d = json.loads(Path(path).read_text())
    return HbdVector.from_dict(d["hbd"] if "hbd" in d else d)


def load_dataset(manifest: Manifest, image_dir, hbd_dir=None) -> Dataset:
    """Images ``<image_dir>/<id>.pgm``; targets from ``<hbd_dir>/<id>.json`` or the manifest."""
    image_dir = Path(image_dir)
    imgs, targets, missing = [], [], []
    for rec in manifest.subjects:
        p = image_dir / f"{rec.id}.pgm"
        if not p.is_file():
            missing.append(str(p))
            continue
        if hbd_dir is not None:
            hp = Path(hbd_dir) / f"{rec.id}.json"
            if not hp.is_file():
                missing.append(str(hp))
                continue
            hbd = load_hbd_json(hp)
        elif rec.hbd is not None:
            hbd = rec.hbd
        else:
            missing.append(f"{rec.id}: no ground truth in manifest")
            continue
        imgs.append(read_pgm(p).pixels)
        targets.append(hbd.to_array())
    if missing:
        shown = "\n  ".join(missing[:10])
        more = f"\n  ... and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise DatasetError(f"{len(missing)} missing assets:\n  {shown}{more}")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DatasetError(f"images have differing sizes: {sorted(shapes)}")
    return Dataset([r.id for r in manifest.subjects], np.stack(imgs), np.array(targets),
                   [r.gender for r in manifest.subjects], [r.pose for r in manifest.subjects])


# --------------------------------------------------------------- experiment

@dataclass
class FoldOutcome:
    fold: int
    losses: list[float]
    predictions: np.ndarray
    baseline_amad_mm: float
    amad_mm: float
    network: Network


@dataclass
class ExperimentResult:
    results: ResultsTensor
    report: MetricsReport
    folds: list[FoldOutcome]
    split: FoldSplit

    @property
    def losses(self) -> list[list[float]]:
        return [f.losses for f in self.folds]


def _amad_mm(pred: np.ndarray, actual: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - actual).mean(axis=0)) * 1000.0)


def train_fold(data: Dataset, train_idx: np.ndarray, eval_idx: np.ndarray, cfg: TrainConfig,
               fold: int, log: Callable[[str], None] | None = None) -> FoldOutcome:
    images, targets = data.images[train_idx], data.targets[train_idx]
    net = Network.initialized(cfg.seed + fold, input_size=data.images.shape[1], hidden=cfg.hidden,
                              dtype=cfg.dtype, conv2_relu_bn=cfg.conv2_relu_bn,
                              output_bias=targets.mean(axis=0))
    rng = np.random.default_rng([cfg.seed, fold])
    velocity: dict[str, np.ndarray] = {}
    losses = []
    for epoch in range(cfg.epochs):
        losses.append(train_epoch(net, images, targets, cfg, velocity, rng))
        if log:
            log(f"fold {fold} epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.6g}")
    pred = net.predict(to_input(data.images[eval_idx], net.dtype.type), cfg.batch_size)
    pred = pred.astype(np.float64)
    actual = data.targets[eval_idx]
    baseline = np.broadcast_to(targets.mean(axis=0), actual.shape)
    return FoldOutcome(fold, losses, pred, _amad_mm(baseline, actual), _amad_mm(pred, actual), net)


def run_experiment(data: Dataset, cfg: TrainConfig = TrainConfig(), k: int = 5, seed: int = 0,
                   stratify: bool = False, jobs: int = 1,
                   log: Callable[[str], None] | None = None,
                   metadata: dict | None = None) -> ExperimentResult:
    """Train one freshly initialized network per fold and evaluate it on that fold.

    The network of fold ``j`` is initialized with seed ``cfg.seed + j``.
    """
    strata = [f"{g}/{p}" for g, p in zip(data.genders, data.poses)] if stratify else None
    split = kfold_split(len(data), k, seed, strata)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(lambda j: train_fold(data, split.train[j], split.eval[j], cfg, j, log),
                                  range(k)))
    else:
        folds = [train_fold(data, split.train[j], split.eval[j], cfg, j, log) for j in range(k)]
    results = ResultsTensor.empty([len(e) for e in split.eval])
    for j, f in enumerate(folds):
        n = len(split.eval[j])
        results.values[j, :n, 0] = f.predictions
        results.values[j, :n, 1] = data.targets[split.eval[j]]
        results.indices[j, :n] = split.eval[j]
    meta = {
        "train_config": cfg.to_json(),
        "k": k,
        "split_seed": seed,
        "stratified": stratify,
        "init": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), seed = train seed + fold; "
                "output bias = training-target mean",
        "dataset_sha256": data.digest(),
        "n_items": len(data),
        "image_scaling": "uint8 / 255",
        "fold_amad_mm": [f.amad_mm for f in folds],
        "fold_baseline_amad_mm": [f.baseline_amad_mm for f in folds],
        "fold_losses": [f.losses for f in folds],
        **(metadata or {}),
    }
    return ExperimentResult(results, MetricsReport.from_results(results, meta), folds, split)


def format_estimates(data: Dataset, result: ExperimentResult, fold: int = 0, count: int = 4) -> str:
    """Estimated vs actual HBDs for a few evaluated subjects, with signed percent error."""
    out = []
    f = result.results.fold(fold)
    for row, idx in zip(f[:count], result.results.indices[fold][:count]):
        out.append(f"{data.ids[idx]} ({data.genders[idx]}, {data.poses[idx]})")
        for name, est, act in zip(HBD_NAMES, row[0], row[1]):
            out.append(f"  {HBD_LABELS[name]:<22} est {est:7.4f}  act {act:7.4f}  "
                       f"{100.0 * (est - act) / act:+6.2f}%")
    return "\n".join(out) + "\n"


def save_checkpoint(net: Network, path, meta: dict) -> None:
    container.save(path, "checkpoint", net.state_arrays(), meta)


def load_checkpoint(path) -> tuple[Network, dict]:
    arrays, meta = container.load(path, "checkpoint")
    net = Network(meta["input_size"], meta["hidden"], meta["dtype"], meta["conv2_relu_bn"])
    net.load_state_arrays(arrays)
    return net, meta


def checkpoint_meta(net: Network, cfg: TrainConfig, fold: int, extra: dict | None = None) -> dict:
    return {"input_size": net.input_size, "hidden": net.hidden, "dtype": net.dtype.name,
            "conv2_relu_bn": net.conv2_relu_bn, "fold": fold, "epoch": cfg.epochs,
            "train_config": cfg.to_json(), **(extra or {})}
