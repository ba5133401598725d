import math

import numpy as np
import pytest

from convcrf.errors import DataError, TrainingDivergedError, UsageError
from convcrf.kernels import spatial_features
from convcrf.meanfield import ConvCrfConfig, run_crf
from convcrf.params import CrfParams, load_checkpoint, save_checkpoint
from convcrf.synthetic import NoiseConfig, corrupt_labels, labels_to_unary, make_toy_dataset
from convcrf.tensor import make_rng
from convcrf.training import (
    TrainConfig,
    backward,
    dataset_loss,
    finite_difference_check,
    fit,
    loss_and_grads,
    loss_cross_entropy,
    loss_cross_entropy_grad,
)


def small_instance(seed, c=3, size=6):
    rng = make_rng(seed)
    image = rng.uniform(0, 255, size=(1, 3, size, size))
    unary = rng.normal(0, 1.5, size=(1, c, size, size))
    labels = rng.integers(0, c, size=(1, size, size))
    return image, unary, labels


def full_params(seed, c=3, size=6):
    rng = make_rng(1000 + seed)
    pos = spatial_features(1, size, size)
    sf = np.stack([pos["pos_x"][0], pos["pos_y"][0]]) + rng.normal(0, 0.3, size=(2, size, size))
    return CrfParams.create(
        weights=rng.uniform(0.5, 2.0, size=2),
        thetas=(rng.uniform(2, 5), rng.uniform(20, 60), rng.uniform(1, 3)),
        smoothness_features=sf,
        compatibility=(1 - np.eye(c)) + rng.normal(0, 0.2, size=(c, c)),
    )


class TestLoss:
    def test_perfect_prediction(self):
        labels = make_rng(0).integers(0, 3, size=(1, 4, 4))
        Q = np.eye(3)[labels].transpose(0, 3, 1, 2)
        assert loss_cross_entropy(Q, labels) <= 1e-6

    def test_uniform(self):
        labels = make_rng(1).integers(0, 4, size=(2, 3, 3))
        assert loss_cross_entropy(np.full((2, 4, 3, 3), 0.25), labels) == pytest.approx(math.log(4))
        assert math.log(4) == pytest.approx(1.3863, abs=1e-4)

    def test_scalar_loop_with_ignore(self):
        rng = make_rng(2)
        Q = rng.dirichlet(np.ones(3), size=(2, 4, 5)).transpose(0, 3, 1, 2)
        labels = rng.integers(0, 3, size=(2, 4, 5))
        labels[0, 0, :2] = 255
        total, count = 0.0, 0
        for b, x, y in np.ndindex(2, 4, 5):
            if labels[b, x, y] != 255:
                total -= math.log(max(Q[b, labels[b, x, y], x, y], 1e-8))
                count += 1
        assert loss_cross_entropy(Q, labels) == pytest.approx(total / count, rel=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            loss_cross_entropy(np.full((1, 2, 2, 2), 0.5), np.full((1, 2, 2), 3))

    def test_floor(self):
        Q = np.zeros((1, 2, 1, 1))
        Q[0, 1] = 1.0
        assert loss_cross_entropy(Q, np.zeros((1, 1, 1), dtype=int)) == pytest.approx(-math.log(1e-8))
        assert loss_cross_entropy_grad(Q, np.zeros((1, 1, 1), dtype=int))[0, 0, 0, 0] == 0.0


class TestBackward:
    def test_requires_tape(self):
        with pytest.raises(UsageError):
            backward(None, np.zeros((1, 2, 2, 2)))

    def test_zero_upstream(self):
        image, unary, _ = small_instance(3)
        params = full_params(3)
        _, tape = run_crf(unary, image, params, ConvCrfConfig(3, 2, 1, compatibility="matrix"), record=True)
        grads = backward(tape, np.zeros(unary.shape))
        for g in grads.values():
            assert np.all(g == 0)

    def test_single_pixel_weight_gradient_is_zero(self):
        rng = make_rng(4)
        image = rng.uniform(0, 255, size=(1, 3, 1, 1))
        unary = rng.normal(size=(1, 3, 1, 1))
        _, grads = loss_and_grads(CrfParams(), ConvCrfConfig(3, 2, 1), image, unary, np.array([[[1]]]))
        assert np.all(grads["log_weights"] == 0)

    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize(
        "config",
        [
            ConvCrfConfig(3, 2, 1, compatibility="matrix"),
            ConvCrfConfig(5, 2, 1),
            ConvCrfConfig(3, 2, 2, compatibility="matrix"),
            ConvCrfConfig(3, 2, 2, compatibility="matrix", blur_mode="resolution"),
        ],
        ids=["k3-matrix", "k5-potts", "blur2-message", "blur2-resolution"],
    )
    def test_all_groups_match_finite_differences(self, seed, config):
        report = finite_difference_check(full_params(seed), small_instance(seed), eps=1e-3, config=config)
        assert report.ok
        assert max(report.errors.values()) <= 1e-3, report.errors

    def test_theta_gamma_seed0(self):
        report = finite_difference_check(full_params(0), small_instance(0), 1e-3, ConvCrfConfig(3, 2, 1))
        assert report.errors["log_thetas"] <= 1e-3

    def test_report_flags_large_errors(self):
        from convcrf.training import GradCheckReport

        report = GradCheckReport({"log_weights": 5e-3, "log_thetas": 2e-2, "compatibility": float("nan")})
        assert report.flagged == ["compatibility", "log_thetas"]
        assert not report.ok

    def test_epsilon_sweep_is_v_shaped(self):
        # float32 forward pass: truncation error dominates at large eps,
        # rounding noise at small eps
        params = CrfParams.create(thetas=(3.0, 30.0, 2.0))
        instance = small_instance(5)
        config = ConvCrfConfig(3, 2, 1)
        ref = finite_difference_check(params, instance, 1e-3, config, dtype=np.float64)
        assert ref.ok
        errs = {}
        for eps in (1e-1, 1e-3, 1e-5):
            errs[eps] = finite_difference_check(params, instance, eps, config, dtype=np.float32).errors["log_thetas"]
        assert errs[1e-3] < errs[1e-1]
        assert errs[1e-3] < errs[1e-5]


def toy_pairs(n, seed, size=32, c=4):
    nc = NoiseConfig(8, 0.1, c, seed)
    pairs = []
    for i, (image, gt) in enumerate(make_toy_dataset(n, size, size, c, seed)):
        unary = labels_to_unary(corrupt_labels(gt, nc, rng=make_rng(seed + 100 + i)), 0.9, c)
        pairs.append((image, unary, gt))
    return pairs


class TestFit:
    def test_zero_learning_rate(self):
        data = toy_pairs(2, 0)
        params = CrfParams()
        out, losses = fit(params, data, TrainConfig(learning_rate=0.0, steps=3, batch_size=2), ConvCrfConfig(5, 2, 2))
        for name, value in params.groups().items():
            np.testing.assert_array_equal(out.groups()[name], value)
        assert losses[0] == losses[1] == losses[2]

    def test_sgd_descends_on_single_sample(self):
        data = toy_pairs(1, 1)
        _, losses = fit(
            CrfParams(), data, TrainConfig(learning_rate=0.05, steps=8, optimizer="sgd"), ConvCrfConfig(5, 3, 2)
        )
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_deterministic(self):
        data = toy_pairs(4, 2)
        tc = TrainConfig(learning_rate=1e-2, steps=4, batch_size=2, seed=3)
        _, a = fit(CrfParams(), data, tc, ConvCrfConfig(5, 2, 2))
        _, b = fit(CrfParams(), data, tc, ConvCrfConfig(5, 2, 2))
        assert a == b

    def test_unaries_are_read_only(self):
        data = toy_pairs(2, 3)
        frozen = [u.copy() for _, u, _ in data]
        for _, u, _ in data:
            u.setflags(write=False)
        fit(CrfParams(), data, TrainConfig(learning_rate=1e-2, steps=2), ConvCrfConfig(5, 2, 2))
        for (_, u, _), ref in zip(data, frozen):
            np.testing.assert_array_equal(u, ref)

    def test_positivity_under_aggressive_updates(self):
        data = toy_pairs(1, 4)
        out, _ = fit(CrfParams(), data, TrainConfig(learning_rate=2.0, steps=5), ConvCrfConfig(5, 2, 2))
        assert np.all(out.weights > 0) and np.all(out.thetas > 0)

    def test_nan_aborts_with_state(self):
        image, unary, labels = toy_pairs(1, 5)[0]
        bad = unary.copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            fit(CrfParams(), [(image, bad, labels)], TrainConfig(steps=2), ConvCrfConfig(5, 2, 2))
        assert info.value.state["step"] == 0
        assert "params" in info.value.state

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            fit(CrfParams(), [], TrainConfig(steps=1))

    def test_resume_continues(self):
        data = toy_pairs(3, 6)
        tc = TrainConfig(learning_rate=1e-2, steps=6, batch_size=3)
        config = ConvCrfConfig(5, 2, 2)
        _, straight = fit(CrfParams(), data, tc, config)
        half = TrainConfig(learning_rate=1e-2, steps=3, batch_size=3)
        opt = half.make_optimizer()
        mid, first = fit(CrfParams(), data, half, config, optimizer=opt)
        _, second = fit(mid, data, half, config, optimizer=opt, start_step=3)
        np.testing.assert_allclose(first + second, straight, rtol=1e-6)

    def test_dataset_loss(self):
        data = toy_pairs(2, 7)
        config = ConvCrfConfig(5, 2, 2)
        each = [loss_cross_entropy(run_crf(u, img, CrfParams(), config)[0], lab) for img, u, lab in data]
        assert dataset_loss(CrfParams(), config, data) == pytest.approx(np.mean(each))


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = full_params(0)
        save_checkpoint(tmp_path / "ck", params, {"a": 1}, {"t": np.array([3.0])}, {"steps_done": 3})
        loaded, extra, manifest = load_checkpoint(tmp_path / "ck")
        for name, value in params.groups().items():
            assert loaded.groups()[name].tobytes() == value.tobytes()
            assert loaded.groups()[name].shape == value.shape
        assert extra["t"][0] == 3.0
        assert manifest["metadata"]["steps_done"] == 3
        assert (tmp_path / "ck" / "config.json").exists()

    def test_zero_weight_survives(self, tmp_path):
        params = CrfParams.create(weights=(0.0, 2.0))
        save_checkpoint(tmp_path / "ck", params)
        loaded, _, _ = load_checkpoint(tmp_path / "ck")
        np.testing.assert_array_equal(loaded.weights, [0.0, params.weights[1]])

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)
