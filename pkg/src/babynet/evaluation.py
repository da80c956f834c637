"""Cross-validation, regression metrics, ensembling and the paired t-test."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import PatientRecord
from .model import ModelConfig, build_model
from .training import TrainConfig, predict_patient, train


class DegenerateInputError(ValueError):
    pass


# -- metrics -----------------------------------------------------------------

@dataclass
class FoldMetrics:
    fold: int
    n: int
    mae: float
    rmse: float
    mape: float
    mae_std: float
    mape_std: float


def evaluate_metrics(preds, targets, fold: int = -1) -> FoldMetrics:
    """MAE, RMSE and MAPE (percent) plus across-patient spreads of |e| and APE."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.size == 0 or p.shape != t.shape:
        raise ValueError(f"need aligned nonempty predictions/targets, got {p.shape} and {t.shape}")
    if np.any(t <= 0):
        raise ValueError("targets must be positive")
    abs_err = np.abs(p - t)
    ape = 100.0 * abs_err / t
    return FoldMetrics(
        fold=fold,
        n=int(p.size),
        mae=float(abs_err.mean()),
        rmse=float(math.sqrt(np.mean(abs_err**2))),
        mape=float(ape.mean()),
        mae_std=float(abs_err.std()),
        mape_std=float(ape.std()),
    )


@dataclass
class PredictionRow:
    patient_id: str
    target_g: float
    pred_g: float
    fold: int


@dataclass
class MetricsReport:
    folds: list[FoldMetrics] = field(default_factory=list)
    predictions: list[PredictionRow] = field(default_factory=list)
    variant: str = ""

    def aggregate(self) -> dict[str, float]:
        """Cross-fold means and spreads, plus pooled across-patient values."""
        out: dict[str, float] = {}
        for key in ("mae", "rmse", "mape"):
            vals = np.array([getattr(f, key) for f in self.folds])
            out[f"m{key}"] = float(vals.mean())
            out[f"m{key}_fold_std"] = float(vals.std())
        pooled = evaluate_metrics([r.pred_g for r in self.predictions], [r.target_g for r in self.predictions])
        out.update(
            pooled_mae=pooled.mae,
            pooled_rmse=pooled.rmse,
            pooled_mape=pooled.mape,
            pooled_mae_std=pooled.mae_std,
            pooled_mape_std=pooled.mape_std,
        )
        return out

    @classmethod
    def from_predictions(cls, rows: list[PredictionRow], variant: str = "") -> "MetricsReport":
        folds = []
        for k in sorted({r.fold for r in rows}):
            sel = [r for r in rows if r.fold == k]
            folds.append(evaluate_metrics([r.pred_g for r in sel], [r.target_g for r in sel], fold=k))
        return cls(folds, list(rows), variant)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "folds": [asdict(f) for f in self.folds],
            "aggregate": self.aggregate(),
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_predictions_csv(directory / "predictions.csv", self.predictions)
        (directory / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# -- CSV interfaces ----------------------------------------------------------

PRED_HEADER = ["patient_id", "target_g", "pred_g", "fold"]


def write_predictions_csv(path, rows: list[PredictionRow], ensemble: dict[str, float] | None = None,
                          estimates: dict[str, float] | None = None) -> None:
    header = list(PRED_HEADER)
    if ensemble is not None:
        header += ["estimate_g", "ensemble_g"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            line = [r.patient_id, repr(r.target_g), repr(r.pred_g), r.fold]
            if ensemble is not None:
                line += [repr(estimates[r.patient_id]), repr(ensemble[r.patient_id])]
            w.writerow(line)


def read_predictions_csv(path) -> list[PredictionRow]:
    with open(path, newline="") as fh:
        return [
            PredictionRow(row["patient_id"], float(row["target_g"]), float(row["pred_g"]), int(row["fold"]))
            for row in csv.DictReader(fh)
        ]


def read_estimates_csv(path) -> dict[str, float]:
    """Read an external ``patient_id,estimate_g`` file (e.g. clinician estimates)."""
    out: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"patient_id", "estimate_g"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header patient_id,estimate_g")
        for row in reader:
            out[row["patient_id"]] = float(row["estimate_g"])
    return out


# -- folds, ensembles, significance ------------------------------------------

def grouped_kfold_split(patient_ids, k: int = 5, seed: int = 0) -> list[list[str]]:
    """Seeded shuffle of unique patient ids, dealt round-robin into ``k`` folds."""
    ids = list(dict.fromkeys(patient_ids))
    if len(ids) < k:
        raise ValueError(f"need at least k={k} patients, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(ids[i])
    return folds


def ensemble_average(model_preds: dict[str, float], external_preds: dict[str, float]) -> dict[str, float]:
    if set(model_preds) != set(external_preds):
        unknown = sorted(set(external_preds) - set(model_preds))
        missing = sorted(set(model_preds) - set(external_preds))
        raise KeyError(f"patient sets differ: unknown {unknown[:5]}, missing {missing[:5]}")
    return {pid: (model_preds[pid] + external_preds[pid]) / 2.0 for pid in model_preds}


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


def student_t_cdf(t: float, dof: float) -> float:
    tail = 0.5 * student_t_sf2(t, dof)
    return 1.0 - tail if t > 0 else tail


@dataclass
class TTestResult:
    statistic: float
    pvalue: float
    dof: int


def paired_t_test(errors_a, errors_b) -> TTestResult:
    """Two-sided paired Student t-test on aligned per-patient errors."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need aligned 1-D inputs, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise DegenerateInputError("paired t-test needs at least 2 pairs")
    diff = a - b
    if np.all(diff == 0):
        return TTestResult(0.0, 1.0, n - 1)
    sd = diff.std(ddof=1)
    if sd == 0:
        raise DegenerateInputError("all paired differences are identical and nonzero; t is undefined")
    t = float(diff.mean() / (sd / math.sqrt(n)))
    return TTestResult(t, student_t_sf2(t, n - 1), n - 1)


# -- cross-validation ---------------------------------------------------------

def _run_fold(records, model_config, train_config, held_out, fold, out_dir) -> list[PredictionRow]:
    held = set(held_out)
    by_id = {r.patient_id: r for r in records}
    model = build_model(model_config)
    fold_dir = Path(out_dir) / f"fold{fold}" if out_dir is not None else None
    result = train(model, [r for r in records if r.patient_id not in held], train_config, fold_dir)
    return [
        PredictionRow(pid, by_id[pid].birth_weight_g, predict_patient(model, by_id[pid], result.scaler), fold)
        for pid in held_out
    ]


def run_cross_validation(
    records: list[PatientRecord],
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    split_seed: int = 0,
    out_dir=None,
    jobs: int = 1,
) -> MetricsReport:
    """Train on k-1 folds and predict the held-out patients, for every fold.

    Each patient receives exactly one out-of-fold prediction.  ``jobs > 1``
    trains folds in separate processes.
    """
    folds = grouped_kfold_split([r.patient_id for r in records], k, split_seed)
    args = [(records, model_config, train_config, held, fi, out_dir) for fi, held in enumerate(folds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, *zip(*args)))
    else:
        results = [_run_fold(*a) for a in args]
    rows = [row for fold_rows in results for row in fold_rows]
    report = MetricsReport.from_predictions(rows, model_config.variant)
    if out_dir is not None:
        report.write(out_dir)
    return report
