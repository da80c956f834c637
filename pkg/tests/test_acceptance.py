"""Acceptance gate: one test per criterion, each summarised as a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import csv
import json
import math
import sys
import tempfile
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from babynet.cli import gradcheck_model, main
from babynet.data import AugmentPolicy, SyntheticConfig, generate_synthetic_dataset
from babynet.evaluation import (
    PredictionRow,
    ensemble_average,
    evaluate_metrics,
    grouped_kfold_split,
    read_estimates_csv,
    read_predictions_csv,
    run_cross_validation,
    write_predictions_csv,
)
from babynet.model import MHSA3D, ModelConfig, build_model
from babynet.ops import global_avg_pool
from babynet.tensor import Tensor, no_grad
from babynet.training import TargetScaler, TrainConfig, train
from oracles import metrics_loop, mhsa_loop

DESK = dict(in_frames=8, in_height=16, in_width=16, width_multiplier=Fraction(1, 8))

FULL_WIDTH_STAGES = {
    "conv1": (64, 16, 32, 32),
    "conv2": (64, 16, 32, 32),
    "conv3": (128, 8, 16, 16),
    "conv4": (256, 4, 8, 8),
    "conv5": (512, 2, 4, 4),
}


@pytest.fixture(scope="module")
def synth15(tmp_path_factory):
    path = tmp_path_factory.mktemp("synth15")
    assert main(["synth", "--out", str(path), "--seed", "0", "--patients", "15"]) == 0
    return path


@pytest.mark.criterion(1, "shape oracle, w=1, input 16x1x64x64")
def test_shape_oracle(detail):
    start = time.perf_counter()
    model = build_model(ModelConfig())
    with no_grad():
        feats = model.features(Tensor(np.random.default_rng(0).random((1, 1, 16, 64, 64))))
        out = model.fc(global_avg_pool(feats["conv5"]))
    for stage, shape in FULL_WIDTH_STAGES.items():
        assert feats[stage].shape == (1, *shape), stage
    assert out.shape == (1, 1)
    assert model.config.stage_shapes() == FULL_WIDTH_STAGES
    elapsed = time.perf_counter() - start
    detail.append(f"5 stages exact, {elapsed:.1f} s")
    assert elapsed < 10


@pytest.mark.criterion(2, "single-head MHSA vs direct loop, [1,8,2,2,2], 1e-5")
def test_mhsa_loop_oracle(detail):
    rng = np.random.default_rng(0)
    m = MHSA3D(8, 1, 2, 2, 2, temporal=True, rng=rng)
    for p in (m.rel_h, m.rel_w, m.rel_t):
        p.data[...] = rng.normal(size=p.shape)
    x = rng.normal(size=(1, 8, 2, 2, 2))
    got = m(Tensor(x)).data
    wq, wk, wv = m.wq.weight.data, m.wk.weight.data, m.wv.weight.data
    ref = mhsa_loop(x, wq, wk, wv, m.position_encoding().data, 1)
    err = float(np.abs(got - ref).max())
    # the oracle without the position term must disagree, so the (K + r) path is exercised
    gap = float(np.abs(got - mhsa_loop(x, wq, wk, wv, None, 1)).max())
    detail.append(f"max abs err {err:.2e}, without r {gap:.2e}")
    assert err <= 1e-5
    assert gap > 1e-3


@pytest.mark.criterion(3, "finite-difference check, desk model, 32 samples, rel < 1e-2")
def test_full_model_gradcheck(detail):
    start = time.perf_counter()
    for seed in range(3):
        model = build_model(ModelConfig(seed=seed, **DESK))
        report = gradcheck_model(model, batch=2, seed=seed, samples=32, eps=1e-3, tol=1e-2)
        assert len(report.entries) == 32
        detail.append(f"seed {seed}: max {report.max_rel_error:.1e}, worst {report.worst.name}")
        assert report.passed, report.summary()
    assert time.perf_counter() - start < 120


def equivariance_gap(m, x, perm):
    with no_grad():
        y = m(Tensor(x)).data
        yp = m(Tensor(x[:, :, perm])).data
    return float(np.abs(yp - y[:, :, perm]).max())


@pytest.mark.criterion(4, "frame permutation: equivariant without positions, broken by R_t")
def test_position_encoding_behaviour(detail):
    rng = np.random.default_rng(0)
    # the stage-5 attention of the real network (T=2, 4x4) and a longer standalone clip (T=8)
    model = build_model(ModelConfig(variant="rtm_tpe", width_multiplier=Fraction(1, 8)))
    cases = [(model.layer4[1].mhsa, (2, 64, 2, 4, 4), [1, 0])]
    cases.append((MHSA3D(16, 4, 8, 2, 2, temporal=True, rng=rng), (2, 16, 8, 2, 2), list(rng.permutation(8))))
    for m, shape, perm in cases:
        x = rng.normal(size=shape)
        broken = equivariance_gap(m, x, perm)
        saved = [p.data.copy() for p in (m.rel_h, m.rel_w, m.rel_t)]
        m.rel_t.data[...] = 0
        spatial_only = equivariance_gap(m, x, perm)
        for p in (m.rel_h, m.rel_w):
            p.data[...] = 0
        zeroed = equivariance_gap(m, x, perm)
        for p, s in zip((m.rel_h, m.rel_w, m.rel_t), saved):
            p.data[...] = s
        detail.append(f"T={shape[2]}: zeroed {zeroed:.1e}, R_h+R_w {spatial_only:.1e}, R_t {broken:.1e}")
        assert zeroed <= 1e-5
        assert spatial_only <= 1e-5
        assert broken > 1e-6


@pytest.mark.criterion(5, "learning smoke test: desk CV on 15 patients, 1-patient overfit")
def test_learning_smoke(synth15, tmp_path, detail):
    start = time.perf_counter()
    out = tmp_path / "cv"
    assert main(["cv", "--data", str(synth15), "--out", str(out), "--preset", "desk", "--variant", "rtm_tpe"]) == 0
    ratios = []
    for fold in range(5):
        with open(out / "rtm_tpe" / f"fold{fold}" / "loss.csv", newline="") as fh:
            losses = [float(r["train_mse"]) for r in csv.DictReader(fh)]
        assert len(losses) == 30
        ratios.append(losses[-1] / losses[0])
    rows = read_predictions_csv(out / "rtm_tpe" / "predictions.csv")
    assert sorted(r.patient_id for r in rows) == [f"P{i:03d}" for i in range(15)]
    mape = evaluate_metrics([r.pred_g for r in rows], [r.target_g for r in rows]).mape
    detail.append(f"final/first MSE per fold {', '.join(f'{r:.2f}' for r in ratios)}; OOF MAPE {mape:.1f}%")
    assert max(ratios) < 0.5
    assert math.isfinite(mape) and mape < 40

    rec = generate_synthetic_dataset(SyntheticConfig(num_patients=1, videos_per_patient=1, frames_per_video=32, seed=3))
    cfg = TrainConfig(
        epochs=200, batch_size=8, lr=1e-3, augment=AugmentPolicy.disabled(), target_scaler=TargetScaler(3540.0, 840.0)
    )
    result = train(build_model(ModelConfig(**DESK)), rec, cfg)
    overfit = result.losses[-1] / result.losses[0]
    elapsed = time.perf_counter() - start
    detail.append(f"overfit final/initial {overfit:.1e}; {elapsed / 60:.1f} min")
    assert overfit < 0.01
    assert elapsed < 30 * 60


@pytest.mark.criterion(6, "metric oracles within 1e-6; grouped 5-fold split of 75 ids")
def test_metrics_and_folds(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for n in (1, 5, 20, 75):
        t = rng.uniform(2085, 4995, n)
        p = t + rng.normal(0, 400, n)
        m = evaluate_metrics(p, t)
        worst = max(worst, *(abs(a - b) for a, b in zip((m.mae, m.rmse, m.mape), metrics_loop(p, t))))
    assert worst <= 1e-6

    ids = [f"P{i:03d}" for i in range(75)]
    folds = grouped_kfold_split(ids, 5, seed=0)
    assert [len(f) for f in folds] == [15] * 5
    assert all(not set(a) & set(b) for i, a in enumerate(folds) for b in folds[i + 1 :])
    assert set().union(*map(set, folds)) == set(ids)

    # real out-of-fold run on 75 tiny patients, one epoch per fold
    recs = generate_synthetic_dataset(
        SyntheticConfig(num_patients=75, videos_per_patient=1, frames_per_video=8, frame_size=(16, 16), seed=1)
    )
    report = run_cross_validation(
        recs, ModelConfig(**DESK), TrainConfig(epochs=1, batch_size=8, lr=1e-3), k=5, split_seed=0
    )
    seen = [r.patient_id for r in report.predictions]
    assert sorted(seen) == ids
    assert all(r.patient_id in folds[r.fold] for r in report.predictions)
    elapsed = time.perf_counter() - start
    detail.append(f"max metric diff {worst:.1e}; 75 ids -> 5x15, each predicted once; {elapsed:.1f} s")
    assert elapsed < 5


_ens_dir = Path(tempfile.mkdtemp(prefix="ensemble-"))
_ens_stats = {"cases": 0, "rows": 0}
grams = st.floats(1000, 6000, allow_nan=False)


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.lists(st.tuples(grams, grams, grams), min_size=1, max_size=8))
def check_ensemble_case(rows):
    preds = [PredictionRow(f"P{i}", t, a, 0) for i, (a, b, t) in enumerate(rows)]
    write_predictions_csv(_ens_dir / "model.csv", preds)
    with open(_ens_dir / "est.csv", "w") as fh:
        fh.write("patient_id,estimate_g\n" + "".join(f"P{i},{b!r}\n" for i, (_, b, _) in enumerate(rows)))
    model = {r.patient_id: r.pred_g for r in read_predictions_csv(_ens_dir / "model.csv")}
    est = read_estimates_csv(_ens_dir / "est.csv")
    write_predictions_csv(_ens_dir / "out.csv", preds, ensemble_average(model, est), est)
    with open(_ens_dir / "out.csv", newline="") as fh:
        out = list(csv.DictReader(fh))
    for row in out:
        a, b, e, t = (float(row[k]) for k in ("pred_g", "estimate_g", "ensemble_g", "target_g"))
        assert e == (a + b) / 2
        # exact rational comparison; the only slack is rounding the stored mean to a double
        lhs = abs(Fraction(e) - Fraction(t))
        rhs = (abs(Fraction(a) - Fraction(t)) + abs(Fraction(b) - Fraction(t))) / 2
        assert lhs <= rhs + Fraction(math.ulp(e)) / 2
    _ens_stats["cases"] += 1
    _ens_stats["rows"] += len(out)


@pytest.mark.criterion(7, "ensemble column is the rowwise mean; error dominance, 1000 cases")
def test_ensemble_arithmetic(detail):
    start = time.perf_counter()
    check_ensemble_case()
    elapsed = time.perf_counter() - start
    detail.append(f"{_ens_stats['cases']} cases, {_ens_stats['rows']} rows, {elapsed:.1f} s")
    assert _ens_stats["cases"] >= 1000
    assert elapsed < 5


@pytest.mark.criterion(8, "two seeded desk train runs are bitwise identical")
def test_reproducible_training(synth15, tmp_path, detail):
    start = time.perf_counter()
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["--threads", "1", "train", "--data", str(synth15), "--out", str(out), "--preset", "desk", "--seed", "11"]
        assert main(argv) == 0
        runs.append(out)
    a, b = runs
    files = sorted(p.relative_to(a) for p in (a / "checkpoint").iterdir())
    assert files == sorted(p.relative_to(b) for p in (b / "checkpoint").iterdir())
    assert len(files) > 10
    for f in [*files, Path("loss.csv")]:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    cfg_a, cfg_b = (json.loads((d / "config.json").read_text()) for d in runs)
    assert cfg_a.pop("out") != cfg_b.pop("out") and cfg_a == cfg_b
    elapsed = time.perf_counter() - start
    detail.append(f"{len(files)} checkpoint files + loss.csv identical; {elapsed:.0f} s")
    assert elapsed < 600


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
