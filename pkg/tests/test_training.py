import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from babynet.data import AugmentPolicy, PatientRecord, SyntheticConfig, VideoTensor, generate_synthetic_dataset
from babynet.model import ModelConfig, build_model
from babynet.ops import mse_loss
from babynet.tensor import Tensor, backward
from babynet.training import (
    AdamOptimizer,
    LrSchedule,
    TargetScaler,
    TrainConfig,
    lr_at_epoch,
    predict_patient,
    train,
)

DESK = dict(in_frames=8, in_height=16, in_width=16, width_multiplier=Fraction(1, 8))


def test_mse_examples():
    assert float(mse_loss(Tensor([[2.0], [4.0]]), Tensor([[2.0], [4.0]])).data) == 0.0
    assert float(mse_loss(Tensor([2.0, 4.0]), Tensor([3.0, 3.0])).data) == 1.0


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.zeros(5), requires_grad=True)
    opt = AdamOptimizer([p], lr=1e-4)
    p.grad = np.ones(5, dtype=np.float32)
    opt.step()
    np.testing.assert_allclose(p.data, -1e-4, rtol=1e-3)


def test_adam_zero_gradient_no_decay_is_noop():
    p = Tensor(np.arange(3.0), requires_grad=True)
    opt = AdamOptimizer([p], lr=1e-2)
    p.grad = np.zeros(3, dtype=np.float32)
    opt.step()
    np.testing.assert_array_equal(p.data, np.arange(3.0))


def test_adam_weight_decay_is_coupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamOptimizer([p], lr=1e-3, weight_decay=0.5)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    # g = 0 + 0.5 * 2 > 0, so the first step is -lr
    np.testing.assert_allclose(p.data, [2.0 - 1e-3], rtol=1e-6)


def test_adam_rejects_empty_gradients():
    opt = AdamOptimizer([Tensor(np.zeros(2), requires_grad=True)])
    with pytest.raises(RuntimeError):
        opt.step()


def test_adam_converges_on_quadratic():
    theta = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamOptimizer([theta], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        backward((theta * theta).sum())
        opt.step()
    assert abs(float(theta.data[0])) < 0.01


def test_adam_moment_shapes():
    ps = [Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
    opt = AdamOptimizer(ps)
    assert [m.shape for m in opt.m] == [(2, 3), (4,)] and [v.shape for v in opt.v] == [(2, 3), (4,)]


@pytest.mark.parametrize("epoch,lr", [(0, 1e-4), (159, 1e-4), (160, 1e-5), (199, 1e-5)])
def test_lr_schedule(epoch, lr):
    assert lr_at_epoch(LrSchedule(), epoch) == pytest.approx(lr, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(2085, 4995), st.floats(2000, 5000), st.floats(10, 2000))
def test_target_scaler_round_trip(w, mean, std):
    s = TargetScaler(mean, std)
    assert float(s.inverse(s.transform(w))) == pytest.approx(w, abs=1e-4)


def test_target_scaler_fit_single_patient():
    s = TargetScaler.fit([3000.0])
    assert (s.mean, s.std) == (3000.0, 1.0)


class ConstantModel:
    """Stands in for BabyNet: predicts the mean pixel of each segment."""

    def __init__(self, frames, size):
        self.config = ModelConfig(in_frames=frames, in_height=size, in_width=size)

    def eval(self):
        return self

    def __call__(self, x):
        return Tensor(x.data.reshape(x.shape[0], -1).mean(axis=1, keepdims=True))


def constant_video(values, seg_len, size=2):
    frames = np.concatenate([np.full((seg_len, 1, size, size), v) for v in values])
    return VideoTensor(frames)


def test_predict_patient_constant_and_pair():
    model = ConstantModel(16, 2)
    identity = TargetScaler(0.0, 1.0)
    p = PatientRecord("a", 3454.0, [constant_video([0.3454] * 3, 16)])
    assert predict_patient(model, p, TargetScaler(0.0, 10000.0)) == pytest.approx(3454.0, abs=1e-3)
    p = PatientRecord("b", 3500.0, [constant_video([0.3], 16), constant_video([0.4], 16)])
    assert predict_patient(model, p, TargetScaler(0.0, 10000.0)) == pytest.approx(3500.0, abs=1e-3)
    with pytest.raises(ValueError, match="no 16-frame segments"):
        predict_patient(model, PatientRecord("c", 3000.0, [constant_video([0.1], 8)]), identity)


def test_predict_patient_pools_159_segments():
    rng = np.random.default_rng(0)
    values = [rng.random(53) for _ in range(3)]
    videos = []
    for v in values:
        frames = np.concatenate([np.full((16, 1, 2, 2), x) for x in v] + [np.zeros((4, 1, 2, 2))])
        assert frames.shape[0] == 852
        videos.append(VideoTensor(frames))
    got = predict_patient(ConstantModel(16, 2), PatientRecord("p", 3000.0, videos), TargetScaler(0.0, 1.0))
    oracle = sum(float(np.float32(x)) for v in values for x in v) / 159
    assert got == pytest.approx(oracle, abs=1e-5)


@pytest.fixture(scope="module")
def tiny_records():
    cfg = SyntheticConfig(num_patients=4, videos_per_patient=1, frames_per_video=16, frame_size=(16, 16), seed=2)
    return generate_synthetic_dataset(cfg)


def test_train_writes_loss_csv_and_is_deterministic(tiny_records, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=4, lr=1e-3)
    runs = []
    for name in ("a", "b"):
        model = build_model(ModelConfig(**DESK))
        runs.append(train(model, tiny_records, cfg, tmp_path / name))
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_mse" and len(lines) == 4
    assert runs[0].losses == runs[1].losses
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert all(math.isfinite(v) for v in runs[0].losses)


def test_train_rejects_empty_fold():
    with pytest.raises(ValueError):
        train(build_model(ModelConfig(**DESK)), [], TrainConfig(epochs=1))


def test_overfit_single_patient():
    rec = generate_synthetic_dataset(SyntheticConfig(num_patients=1, videos_per_patient=1, frames_per_video=32, seed=3))
    model = build_model(ModelConfig(**DESK))
    cfg = TrainConfig(
        epochs=120, batch_size=8, lr=1e-3, augment=AugmentPolicy.disabled(), target_scaler=TargetScaler(3540.0, 840.0)
    )
    result = train(model, rec, cfg)
    assert result.losses[-1] < 0.01 * result.losses[0]
