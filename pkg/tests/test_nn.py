import numpy as np
import pytest

from neurht.datagen import gen_blobs
from neurht.nn import (
    Mlp,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    grad,
    input_grad_sign,
    load_model,
    save_model,
    train,
)
from neurht.numerics import RandomSource, softmax


def seeded_mlp(widths, seed, label="t"):
    return Mlp.initialize(widths, RandomSource(seed, label))


def numeric_gradients(model, batch, targets, kind, h=1e-5):
    """Central finite differences per parameter; the independent oracle."""
    grads = []
    for l in range(model.num_layers):
        for attr in ("weights", "biases"):
            param = getattr(model, attr)[l]
            g = np.zeros_like(param)
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + h
                _, logits = model.forward(batch)
                up, _ = _loss_only(logits, targets, kind)
                param[idx] = orig - h
                _, logits = model.forward(batch)
                down, _ = _loss_only(logits, targets, kind)
                param[idx] = orig
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def _loss_only(logits, targets, kind):
    from neurht.nn import loss_and_dlogits

    loss, dl = loss_and_dlogits(logits, targets, kind)
    return loss, dl


def flatten_analytic(grads):
    out = []
    for dw, db in grads:
        out.append(dw)
        out.append(db)
    return out


def relative_block_error(analytic, numeric):
    errs = []
    for a, n in zip(analytic, numeric):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errs.append(np.linalg.norm(a - n) / denom)
    return max(errs)


class TestForward:
    def test_zero_parameters_zero_outputs(self):
        model = Mlp(
            [3, 4, 2],
            [np.zeros((3, 4)), np.zeros((4, 2))],
            [np.zeros(4), np.zeros(2)],
        )
        feats, logits = model.forward(np.array([[1.0, -2.0, 3.0]]))
        assert np.all(feats == 0.0)
        assert np.all(logits == 0.0)

    def test_identity_hidden_relu(self):
        model = Mlp(
            [2, 2, 2],
            [np.eye(2), np.eye(2)],
            [np.zeros(2), np.zeros(2)],
        )
        feats, logits = model.forward(np.array([[1.0, -2.0]]))
        assert np.array_equal(feats[0], [1.0, 0.0])
        assert np.array_equal(logits[0], [1.0, 0.0])

    def test_matches_independent_reimplementation(self):
        model = seeded_mlp([5, 7, 6, 3], 11)
        rng = np.random.default_rng(3)
        batch = rng.uniform(-1, 1, (4, 5))
        # straight-line second implementation
        h = batch
        for l in range(model.num_layers):
            z = h @ model.weights[l] + model.biases[l]
            if l < model.num_layers - 1:
                h_next = np.maximum(z, 0.0)
                features = h_next
            else:
                logits_expected = z
            h = np.maximum(z, 0.0) if l < model.num_layers - 1 else z
        feats, logits = model.forward(batch)
        np.testing.assert_allclose(logits, logits_expected, atol=1e-12, rtol=0)
        np.testing.assert_allclose(feats, features, atol=1e-12, rtol=0)

    def test_batch_row_equals_single_call(self):
        model = seeded_mlp([6, 9, 4], 2)
        rng = np.random.default_rng(8)
        batch = rng.uniform(-1, 1, (10, 6))
        feats_b, logits_b = model.forward(batch)
        for i in range(10):
            feats_1, logits_1 = model.forward(batch[i : i + 1])
            assert np.array_equal(feats_b[i], feats_1[0])
            assert np.array_equal(logits_b[i], logits_1[0])

    def test_shape_mismatch(self):
        model = seeded_mlp([6, 9, 4], 2)
        with pytest.raises(ValueError):
            model.forward(np.zeros((3, 5)))


class TestGrad:
    def test_near_minimum_gradient_vanishes(self):
        # logits already one-hot with huge margin
        model = Mlp(
            [2, 2, 2],
            [np.zeros((2, 2)), np.zeros((2, 2))],
            [np.ones(2), np.array([100.0, 0.0])],
        )
        _, grads = grad(model, np.array([[0.3, 0.4]]), np.array([0]), "hard")
        total = sum(np.abs(dw).sum() + np.abs(db).sum() for dw, db in grads)
        assert total < 1e-6

    def test_soft_targets_equal_softmax_zero_gradient(self):
        model = seeded_mlp([4, 5, 3], 6)
        batch = np.random.default_rng(0).uniform(0, 1, (3, 4))
        _, logits = model.forward(batch)
        _, grads = grad(model, batch, softmax(logits), "soft")
        total = sum(np.abs(dw).sum() + np.abs(db).sum() for dw, db in grads)
        assert total < 1e-10

    @pytest.mark.parametrize("kind", ["hard", "soft", "mse"])
    def test_finite_difference_check(self, kind):
        model = seeded_mlp([4, 6, 5, 3], 13)
        rng = np.random.default_rng(5)
        batch = rng.uniform(-1, 1, (6, 4))
        if kind == "hard":
            targets = rng.integers(0, 3, 6)
        elif kind == "soft":
            targets = softmax(rng.uniform(-1, 1, (6, 3)))
        else:
            targets = rng.uniform(-1, 1, (6, 3))
        _, analytic = grad(model, batch, targets, kind)
        numeric = numeric_gradients(model, batch, targets, kind)
        assert relative_block_error(flatten_analytic(analytic), numeric) < 1e-4

    def test_unnormalized_soft_targets_rejected(self):
        model = seeded_mlp([4, 5, 3], 6)
        batch = np.zeros((2, 4))
        bad = np.full((2, 3), 0.5)
        with pytest.raises(ValueError):
            grad(model, batch, bad, "soft")

    def test_label_out_of_range_rejected(self):
        model = seeded_mlp([4, 5, 3], 6)
        with pytest.raises(ValueError):
            grad(model, np.zeros((1, 4)), np.array([3]), "hard")


class TestInputGradSign:
    def test_matches_finite_difference_signs(self):
        model = seeded_mlp([6, 8, 4], 21)
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, 6)
        signs = input_grad_sign(model, x, 1)
        from neurht.nn import loss_and_dlogits

        h = 1e-6
        for i in range(6):
            up = x.copy()
            up[i] += h
            down = x.copy()
            down[i] -= h
            _, lu = model.forward(up[None])
            _, ld = model.forward(down[None])
            lu_loss, _ = loss_and_dlogits(lu, np.array([1]), "hard")
            ld_loss, _ = loss_and_dlogits(ld, np.array([1]), "hard")
            g = (lu_loss - ld_loss) / (2 * h)
            if abs(g) > 1e-6:
                assert signs[i] == np.sign(g)

    def test_dead_path_yields_zero(self):
        # first input never reaches any active unit: its column is zero
        w0 = np.array([[0.0, 0.0], [1.0, 1.0]])
        model = Mlp([2, 2, 2], [w0, np.eye(2)], [np.zeros(2), np.zeros(2)])
        signs = input_grad_sign(model, np.array([0.5, 0.5]), 0)
        assert signs[0] == 0.0

    def test_positive_scaling_invariance(self):
        # the sign field is invariant under positive loss scaling by
        # construction; equivalently batch-mean scaling (1/n) never flips it
        model = seeded_mlp([5, 7, 3], 4)
        x = np.random.default_rng(1).uniform(0, 1, 5)
        s1 = input_grad_sign(model, x, 2)
        s2 = input_grad_sign(model, x, 2)
        assert np.array_equal(s1, s2)


class TestTrain:
    def test_separable_blobs_reach_full_accuracy(self):
        data = gen_blobs(2, 16, 60, 0.05, seed=33, split="train", image_mode=True)
        model = seeded_mlp([16, 16, 2], 3)
        cfg = TrainConfig(epochs=30, batch_size=16, learning_rate=0.1, momentum=0.9, seed=1)
        trained, trace = train(model, data.inputs, data.labels, cfg)
        assert accuracy(trained, data.inputs, data.labels) == 1.0
        assert trace[-1] < trace[0]

    def test_zero_learning_rate_is_identity(self):
        data = gen_blobs(2, 16, 10, 0.2, seed=9)
        model = seeded_mlp([16, 8, 2], 7)
        cfg = TrainConfig(epochs=3, batch_size=8, learning_rate=0.0, seed=1)
        trained, _ = train(model, data.inputs, data.labels, cfg)
        for w0, w1 in zip(model.weights, trained.weights):
            assert np.array_equal(w0, w1)
        for b0, b1 in zip(model.biases, trained.biases):
            assert np.array_equal(b0, b1)

    def test_same_seed_identical_parameters(self):
        data = gen_blobs(3, 16, 30, 0.3, seed=12)
        model = seeded_mlp([16, 12, 3], 5)
        cfg = TrainConfig(epochs=5, batch_size=16, learning_rate=0.05, momentum=0.5, seed=42)
        a, _ = train(model, data.inputs, data.labels, cfg)
        b, _ = train(model, data.inputs, data.labels, cfg)
        assert a.parameter_digest() == b.parameter_digest()

    def test_input_model_untouched(self):
        data = gen_blobs(2, 16, 10, 0.2, seed=9)
        model = seeded_mlp([16, 8, 2], 7)
        digest = model.parameter_digest()
        train(model, data.inputs, data.labels, TrainConfig(epochs=2, seed=0))
        assert model.parameter_digest() == digest

    def test_divergence_aborts_with_diagnostic(self):
        # squared error amplifies multiplicatively at an absurd rate until
        # the loss overflows; training must abort, not march on
        data = gen_blobs(2, 16, 40, 0.3, seed=9)
        model = seeded_mlp([16, 8, 2], 7)
        targets = np.random.default_rng(0).uniform(-1, 1, (len(data), 2))
        cfg = TrainConfig(epochs=50, batch_size=8, learning_rate=1e4, loss="mse", seed=1)
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch"):
            train(model, data.inputs, targets, cfg)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(epochs=1, loss="nope")


class TestAccuracy:
    def _constant_model(self, k, hot):
        bias = np.zeros(k)
        bias[hot] = 10.0
        return Mlp([2, 2, k], [np.zeros((2, 2)), np.zeros((2, k))], [np.zeros(2), bias])

    def test_all_correct(self):
        model = self._constant_model(3, 1)
        x = np.zeros((5, 2))
        assert accuracy(model, x, np.full(5, 1)) == 1.0

    def test_all_wrong(self):
        model = self._constant_model(3, 1)
        x = np.zeros((5, 2))
        assert accuracy(model, x, np.full(5, 2)) == 0.0

    def test_half(self):
        model = self._constant_model(3, 1)
        x = np.zeros((4, 2))
        assert accuracy(model, x, np.array([1, 1, 0, 2])) == 0.5

    def test_tie_breaks_to_lowest_index(self):
        model = self._constant_model(3, 0)
        model.biases[1][:] = 0.0  # all logits equal -> argmax 0
        x = np.zeros((2, 2))
        assert accuracy(model, x, np.array([0, 0])) == 1.0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = seeded_mlp([6, 10, 8, 3], 77)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        back = load_model(path)
        assert back.widths == model.widths
        assert back.parameter_digest() == model.parameter_digest()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"ZZZZ" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_model(path)


class TestGradCheckSweep:
    def test_twenty_seeded_architecture_batches(self):
        # architectures from the acceptance sweep, 10 seeds each
        for arch in ([8, 16, 4], [32, 64, 64, 10]):
            for seed in range(10):
                model = seeded_mlp(arch, 100 + seed)
                rng = np.random.default_rng(seed)
                batch = rng.uniform(-1, 1, (4, arch[0]))
                targets = rng.integers(0, arch[-1], 4)
                _, analytic = grad(model, batch, targets, "hard")
                numeric = numeric_gradients(model, batch, targets, "hard")
                err = relative_block_error(flatten_analytic(analytic), numeric)
                assert err < 1e-4, f"arch {arch} seed {seed}: {err}"
