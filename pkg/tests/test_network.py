"""Tests for network assembly, the training loop, evaluation, checkpoints."""

import struct

import numpy as np
import pytest

from ocn.data import LabeledImages, synthesize_digits
from ocn.gabor import GaborBankSpec, build_filter_matrix, default_angles
from ocn.layers import Linear
from ocn.linalg import NumericalError
from ocn.network import (
    CheckpointError,
    EpochRecord,
    NetworkConfig,
    TrainConfig,
    analytic_param_count,
    build_network,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from ocn.solver import LandmarkBank


def perfect_bank(size: int) -> LandmarkBank:
    """A bank whose reconstruction is exactly the 36-orientation lattice."""
    spec = GaborBankSpec(n_orient=36, n_scale=5, kernel_size=size)
    fm = build_filter_matrix(spec, 1, default_angles(spec))
    return LandmarkBank(
        landmarks=fm.x.copy(),
        coefficients=np.eye(fm.x.shape[1]),
        spec=spec,
        angles=fm.angles,
        scale_index=1,
    )


def small_ocn(seed=0, widths=(2, 3, 4, 5), n_orient=2, kernel=3):
    nc = NetworkConfig(
        stage_widths=widths, kernel_size=kernel, n_orient=n_orient, use_ocn=True
    )
    return build_network(nc, perfect_bank(kernel), seed=seed)


def small_cnn(seed=0, widths=(2, 3, 4, 5), kernel=3):
    nc = NetworkConfig(stage_widths=widths, kernel_size=kernel, use_ocn=False)
    return build_network(nc, seed=seed)


# ---------------------------------------------------------------------------
# configs


def test_network_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(stage_widths=(1, 2, 3))
    with pytest.raises(ValueError):
        NetworkConfig(stage_widths=(0, 2, 3, 4))
    with pytest.raises(ValueError):
        NetworkConfig(kernel_size=4)
    with pytest.raises(ValueError):
        NetworkConfig(n_orient=0)
    with pytest.raises(ValueError):
        NetworkConfig(n_scale=0)


def test_network_config_coerces_widths():
    nc = NetworkConfig(stage_widths=[4, 5, 6, 7])
    assert nc.stage_widths == (4, 5, 6, 7)
    assert isinstance(nc.stage_widths, tuple)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1e-5)
    with pytest.raises(ValueError):
        TrainConfig(lr_halving_period_epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    TrainConfig(epochs=0)  # an all-evaluation run is allowed


def test_lr_schedule_halves_every_period():
    tc = TrainConfig()
    assert tc.lr_at(0) == 0.001
    assert tc.lr_at(9) == 0.001
    assert tc.lr_at(10) == 0.0005
    # epoch 25 sits in the third period: two halvings
    assert tc.lr_at(25) == pytest.approx(0.001 / 4)


# ---------------------------------------------------------------------------
# assembly


@pytest.mark.parametrize("kernel", [3, 5, 7])
def test_ocn_forward_shape(kernel):
    net = small_ocn(kernel=kernel)
    x = np.random.default_rng(0).random((2, 1, 28, 28))
    net.set_train_mode(False)
    logits = net.forward(x)
    assert logits.shape == (2, 10)
    assert np.all(np.isfinite(logits))


def test_cnn_forward_shape():
    net = small_cnn()
    x = np.random.default_rng(1).random((3, 1, 28, 28))
    net.set_train_mode(False)
    assert net.forward(x).shape == (3, 10)


def test_ocn_needs_bank():
    with pytest.raises(ValueError, match="bank"):
        build_network(NetworkConfig(use_ocn=True))


def test_bank_kernel_mismatch():
    with pytest.raises(ValueError, match="5x5"):
        build_network(NetworkConfig(kernel_size=5), perfect_bank(3))


def test_param_count_matches_analytic():
    for net, nc in [
        (small_ocn(n_orient=3), NetworkConfig((2, 3, 4, 5), 3, n_orient=3)),
        (small_cnn(), NetworkConfig((2, 3, 4, 5), 3, use_ocn=False)),
    ]:
        assert net.n_params == analytic_param_count(nc)


def test_param_count_reference_models():
    # the small OCN4(3x3) and the plain network width-doubled to match it
    ocn = NetworkConfig((10, 20, 40, 80), 3, n_orient=4, use_ocn=True)
    cnn = NetworkConfig((20, 40, 80, 160), 3, use_ocn=False)
    assert analytic_param_count(ocn) == 152370
    assert analytic_param_count(cnn) == 152990
    # widths doubled, parameters within half a percent of each other
    assert abs(analytic_param_count(ocn) - analytic_param_count(cnn)) < 700


def test_build_determinism():
    a = small_ocn(seed=3)
    b = small_ocn(seed=3)
    for pa, pb in zip(a.parameter_arrays(), b.parameter_arrays()):
        assert np.array_equal(pa, pb)
    c = small_ocn(seed=4)
    assert any(
        not np.array_equal(pa, pc)
        for pa, pc in zip(a.parameter_arrays(), c.parameter_arrays())
    )


# ---------------------------------------------------------------------------
# training loop


def test_loss_curve_length_single_batch():
    data = synthesize_digits(10, seed=0)
    net = small_cnn()
    records = train(net, data, TrainConfig(epochs=1, seed=0))
    assert len(records) == 1
    # 10 samples, batch 128: one batch per epoch
    assert len(records[0].batch_losses) == 1
    assert records[0].train_loss == pytest.approx(records[0].batch_losses[0])


def test_loss_curve_length_multiple_batches():
    data = synthesize_digits(10, seed=0)
    net = small_cnn()
    records = train(net, data, TrainConfig(batch_size=4, epochs=2, seed=0))
    assert [len(r.batch_losses) for r in records] == [3, 3]
    for r in records:
        assert r.train_loss == pytest.approx(np.mean(r.batch_losses))


def test_epoch_record_fields():
    data = synthesize_digits(12, seed=1)
    net = small_cnn()
    tc = TrainConfig(batch_size=6, lr=0.01, epochs=3, lr_halving_period_epochs=2)
    records = train(net, data, tc, eval_data=data)
    assert [r.epoch for r in records] == [0, 1, 2]
    assert [r.lr for r in records] == [0.01, 0.01, 0.005]
    for r in records:
        assert r.seconds >= 0.0
        assert r.test_error is not None and 0.0 <= r.test_error <= 100.0
    no_eval = train(small_cnn(), data, TrainConfig(epochs=1))
    assert no_eval[0].test_error is None


def test_zero_epochs_returns_no_records():
    data = synthesize_digits(5, seed=0)
    assert train(small_cnn(), data, TrainConfig(epochs=0)) == []


def test_train_empty_data_raises():
    empty = LabeledImages(
        images=np.zeros((0, 28, 28)), labels=np.zeros(0, dtype=np.int64)
    )
    with pytest.raises(ValueError, match="empty"):
        train(small_cnn(), empty, TrainConfig(epochs=1))


def test_train_loss_decreases():
    data = synthesize_digits(60, seed=2)
    net = small_cnn(seed=0)
    records = train(net, data, TrainConfig(batch_size=20, lr=0.05, epochs=5, seed=0))
    assert records[-1].train_loss < records[0].train_loss


def test_train_determinism():
    data = synthesize_digits(30, seed=3)
    tc = TrainConfig(batch_size=10, lr=0.05, epochs=2, seed=1)
    nets = [small_ocn(seed=0), small_ocn(seed=0)]
    reports = []
    for net in nets:
        train(net, data, tc)
        reports.append(evaluate(net, data))
    for pa, pb in zip(nets[0].parameter_arrays(), nets[1].parameter_arrays()):
        assert np.array_equal(pa, pb)
    assert reports[0].error_rate == reports[1].error_rate
    assert reports[0].per_class_errors == reports[1].per_class_errors


def test_divergent_loss_aborts():
    data = synthesize_digits(20, seed=4)
    net = small_cnn(seed=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError, match="diverged"):
            train(net, data, TrainConfig(batch_size=8, lr=1e12, epochs=3, seed=0))


def test_only_learned_parameters_move():
    data = synthesize_digits(16, seed=5)
    net = small_ocn(seed=0)
    stacks_before = [
        layer.modulator.lgf_stack.copy()
        for layer in net.layers
        if hasattr(layer, "modulator")
    ]
    train(net, data, TrainConfig(batch_size=8, lr=0.1, epochs=1, seed=0))
    stacks_after = [
        layer.modulator.lgf_stack
        for layer in net.layers
        if hasattr(layer, "modulator")
    ]
    for before, after in zip(stacks_before, stacks_after):
        assert np.array_equal(before, after)


# ---------------------------------------------------------------------------
# evaluation


def test_always_predicts_zero_error_is_90():
    net = small_cnn(seed=0)
    # force the classifier to emit class 0 regardless of features
    head = net.layers[-1]
    assert isinstance(head, Linear)
    head.weights[...] = 0.0
    head.bias[...] = 0.0
    head.bias[0] = 1.0
    data = synthesize_digits(100, seed=6)  # balanced: ten of each class
    report = evaluate(net, data)
    assert report.error_rate == pytest.approx(90.0)
    assert report.per_class_errors[0] == 0.0
    assert report.per_class_errors[1:] == [100.0] * 9
    assert report.param_count == net.n_params


def test_rotation_zero_matches_plain_eval():
    data = synthesize_digits(20, seed=7)
    net = small_cnn(seed=1)
    plain = evaluate(net, data)
    rotated = evaluate(net, data, rotation_degrees=[0])
    assert rotated.error_rate == plain.error_rate
    assert rotated.per_class_errors == plain.per_class_errors


def test_rotated_evaluation_is_seeded():
    data = synthesize_digits(20, seed=8)
    net = small_cnn(seed=2)
    a = evaluate(net, data, rotation_degrees=[0, 90, 180, 270], seed=5)
    b = evaluate(net, data, rotation_degrees=[0, 90, 180, 270], seed=5)
    assert a.error_rate == b.error_rate
    assert a.per_class_errors == b.per_class_errors


def test_absent_class_reports_zero_error():
    data = synthesize_digits(10, seed=9)
    only_three = LabeledImages(
        images=data.images[data.labels == 3], labels=data.labels[data.labels == 3]
    )
    report = evaluate(small_cnn(), only_three)
    assert len(report.per_class_errors) == 10
    # classes with no test examples report 0, not NaN
    assert all(np.isfinite(e) for e in report.per_class_errors)


def test_predict_empty_batch():
    net = small_cnn()
    preds = net.predict(np.empty((0, 28, 28)))
    assert preds.shape == (0,)


# ---------------------------------------------------------------------------
# the gradient-sanity overfit run


def test_overfits_100_samples():
    # standard correctness sanity: a small model must drive train error to
    # zero on 100 samples within 200 epochs
    data = synthesize_digits(100, seed=7)
    nc = NetworkConfig((6, 8, 10, 12), 3, n_orient=2, use_ocn=True)
    net = build_network(nc, perfect_bank(3), seed=0)
    tc = TrainConfig(
        batch_size=20, lr=0.2, epochs=200, lr_halving_period_epochs=80, seed=0
    )
    train(net, data, tc)
    assert evaluate(net, data).error_rate == 0.0


# ---------------------------------------------------------------------------
# checkpoints


def trained_pair(tmp_path, use_ocn):
    data = synthesize_digits(20, seed=10)
    net = small_ocn(seed=0) if use_ocn else small_cnn(seed=0)
    train(net, data, TrainConfig(batch_size=10, lr=0.05, epochs=1, seed=0))
    path = tmp_path / "model.ocnm"
    save_checkpoint(net, path)
    return net, load_checkpoint(path), path


@pytest.mark.parametrize("use_ocn", [True, False])
def test_checkpoint_roundtrip(tmp_path, use_ocn):
    net, restored, _ = trained_pair(tmp_path, use_ocn)
    assert restored.config == net.config
    for pa, pb in zip(net.parameter_arrays(), restored.parameter_arrays()):
        assert np.array_equal(pa, pb)
    images = synthesize_digits(15, seed=11).images
    assert np.array_equal(net.predict(images), restored.predict(images))


def test_checkpoint_rewrite_is_byte_identical(tmp_path):
    net, _, path = trained_pair(tmp_path, True)
    first = path.read_bytes()
    save_checkpoint(net, path)
    assert path.read_bytes() == first


def test_checkpoint_bad_magic(tmp_path):
    _, _, path = trained_pair(tmp_path, False)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    _, _, path = trained_pair(tmp_path, False)
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    _, _, path = trained_pair(tmp_path, False)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    _, _, path = trained_pair(tmp_path, False)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path):
    _, _, path = trained_pair(tmp_path, False)
    blob = bytearray(path.read_bytes())
    # widen the first stage in the header so stored arrays no longer fit
    blob[8:12] = struct.pack("<I", 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(path)
