import numpy as np
import pytest

from scene_context.embed import (
    EmbeddingModel,
    PARAM_FIELDS,
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    embed,
    init_model,
    load_model,
    pair_accuracy,
    pair_logits,
    pair_loss,
    save_model,
    train,
)
import oracles


def zero_head_model(input_dim=4, feature_dim=3, hidden_dim=3, seed=0):
    """Random branches, all-zero classifier output layer -> logits always (0, 0)."""
    model = init_model(input_dim, feature_dim, hidden_dim, seed=seed)
    model.head_w2[:] = 0.0
    model.head_b2[:] = 0.0
    return model


class TestInitModel:
    def test_shapes_and_zero_biases(self):
        model = init_model(7, feature_dim=5, hidden_dim=3)
        assert model.branch_w1.shape == (5, 7)
        assert model.branch_w2.shape == (5, 5)
        assert model.head_w1.shape == (3, 10)
        assert model.head_w2.shape == (2, 3)
        for name in ("branch_b1", "branch_b2", "head_b1", "head_b2"):
            np.testing.assert_array_equal(getattr(model, name), 0.0)

    def test_seed_determinism(self):
        a = init_model(6, seed=4)
        b = init_model(6, seed=4)
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_rejects_degenerate_dims(self):
        with pytest.raises(ValueError):
            init_model(0)


class TestForward:
    def test_same_input_same_output(self):
        model = init_model(5, 4, 3, seed=1)
        x = np.random.default_rng(0).normal(size=5)
        np.testing.assert_array_equal(embed(model, x), embed(model, x))

    def test_zero_final_branch_layer(self):
        model = init_model(5, 4, 3, seed=2)
        model.branch_w2[:] = 0.0
        model.branch_b2[:] = 0.0
        rng = np.random.default_rng(3)
        for _ in range(5):
            np.testing.assert_array_equal(embed(model, rng.normal(size=5)), np.zeros(4))

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(7)
        for seed in range(4):
            model = init_model(6, 5, 4, seed=seed)
            for name in ("branch_b1", "branch_b2"):
                getattr(model, name)[:] = rng.normal(size=getattr(model, name).shape)
            x = rng.normal(size=6)
            ref = oracles.naive_forward(model.params(), x)
            np.testing.assert_allclose(embed(model, x), ref, atol=1e-12)

    def test_batch_agrees_with_single(self):
        model = init_model(4, 3, 3, seed=5)
        rng = np.random.default_rng(11)
        xs = rng.normal(size=(6, 4))
        ys = rng.normal(size=(6, 4))
        batch = pair_logits(model, xs, ys)
        for row in range(6):
            np.testing.assert_allclose(batch[row], pair_logits(model, xs[row], ys[row]), atol=1e-14)


class TestPairLoss:
    def test_equal_logits_give_ln2(self):
        model = zero_head_model()
        rng = np.random.default_rng(13)
        for label in (0, 1):
            loss, _ = pair_loss(model, rng.normal(size=4), rng.normal(size=4), label)
            assert loss == pytest.approx(np.log(2.0), abs=1e-15)

    def test_equal_nonzero_logits_give_ln2(self):
        # identical head rows -> logits (z, z) with z generally nonzero
        model = init_model(4, 3, 3, seed=6)
        model.head_w2[1] = model.head_w2[0]
        model.head_b2[1] = model.head_b2[0] = 0.7
        rng = np.random.default_rng(15)
        loss, _ = pair_loss(model, rng.normal(size=4), rng.normal(size=4), 1)
        assert loss == pytest.approx(np.log(2.0), abs=1e-15)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(17)
        for seed in range(3):
            model = init_model(5, 4, 3, seed=seed)
            xi = rng.normal(size=5)
            xj = rng.normal(size=5)
            label = seed % 2
            _, grads = pair_loss(model, xi, xj, label)
            numeric = oracles.finite_difference(
                lambda: pair_loss(model, xi, xj, label)[0], model.params()
            )
            for name in PARAM_FIELDS:
                assert oracles.relative_error(grads[name], numeric[name]) < 1e-4

    def test_batch_mean_is_linear_in_the_pairs(self):
        model = init_model(4, 3, 3, seed=9)
        rng = np.random.default_rng(19)
        a = (rng.normal(size=4), rng.normal(size=4), 1)
        b = (rng.normal(size=4), rng.normal(size=4), 0)
        loss_a, grads_a = pair_loss(model, *a)
        loss_b, grads_b = pair_loss(model, *b)
        loss_ab, grads_ab = batch_loss(
            model,
            np.stack([a[0], b[0]]),
            np.stack([a[1], b[1]]),
            np.array([a[2], b[2]]),
        )
        assert loss_ab == pytest.approx((loss_a + loss_b) / 2.0, abs=1e-14)
        for name in PARAM_FIELDS:
            np.testing.assert_allclose(grads_ab[name], (grads_a[name] + grads_b[name]) / 2.0, atol=1e-14)

    def test_duplicating_a_pair_keeps_gradients(self):
        """A batch of one pair repeated has the single pair's mean gradient;
        summing the two copies doubles every entry."""
        model = init_model(4, 3, 3, seed=10)
        rng = np.random.default_rng(23)
        xi, xj = rng.normal(size=4), rng.normal(size=4)
        _, single = pair_loss(model, xi, xj, 1)
        _, doubled = batch_loss(model, np.stack([xi, xi]), np.stack([xj, xj]), np.array([1, 1]))
        for name in PARAM_FIELDS:
            np.testing.assert_allclose(doubled[name], single[name], atol=1e-15)
            np.testing.assert_allclose(2.0 * doubled[name], 2.0 * single[name], atol=1e-15)

    def test_rejects_bad_labels(self):
        model = init_model(3, 2, 2)
        with pytest.raises(ValueError, match="label"):
            pair_loss(model, np.zeros(3), np.zeros(3), 2)


def cluster_problem(seed=0):
    """Two well-separated descriptor clusters and a same-cluster pair oracle."""
    rng = np.random.default_rng(seed)
    n_per = 20
    centers = np.array([3.0, -3.0])
    vectors = np.concatenate(
        [center + rng.normal(scale=0.5, size=(n_per, 8)) for center in centers]
    ).astype(np.float64)
    group = np.repeat([0, 1], n_per)

    same = [(i, j) for i in range(2 * n_per) for j in range(2 * n_per) if i != j and group[i] == group[j]]
    diff = [(i, j) for i in range(2 * n_per) for j in range(2 * n_per) if group[i] != group[j]]

    def sample_batch(rng, n_pos, n_neg):
        pos = [same[k] for k in rng.choice(len(same), size=n_pos, replace=False)]
        neg = [diff[k] for k in rng.choice(len(diff), size=n_neg, replace=False)]
        return [(i, j, 1) for i, j in pos] + [(i, j, 0) for i, j in neg]

    return vectors, sample_batch


class TestTrain:
    def test_zero_learning_rate_is_a_no_op(self):
        vectors, sample_batch = cluster_problem()
        model = init_model(8, 4, 3, seed=1)
        before = {name: getattr(model, name).copy() for name in PARAM_FIELDS}
        config = TrainConfig(batch_size=4, learning_rate=0.0, weight_decay=0.0, max_steps=20)
        train(model, vectors, sample_batch, config)
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(model, name), before[name])

    def test_zero_learning_rate_freezes_weight_decay_too(self):
        # lr multiplies the decayed gradient, so decay alone moves nothing.
        vectors, sample_batch = cluster_problem()
        model = init_model(8, 4, 3, seed=2)
        before = model.copy()
        config = TrainConfig(batch_size=4, learning_rate=0.0, max_steps=10)
        train(model, vectors, sample_batch, config)
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(model, name), getattr(before, name))

    def test_two_cluster_accuracy(self):
        vectors, sample_batch = cluster_problem(seed=3)
        model = init_model(8, 8, 4, seed=0)
        config = TrainConfig(batch_size=8, learning_rate=0.01, lr_drop_step=300, max_steps=400)
        model, losses = train(model, vectors, sample_batch, config)
        holdout = sample_batch(np.random.default_rng(1234), 100, 100)
        assert pair_accuracy(model, vectors, holdout) >= 0.95
        assert losses.shape == (400,)

    def test_loss_trace_is_bit_reproducible(self):
        vectors, sample_batch = cluster_problem(seed=4)
        runs = []
        for _ in range(2):
            model = init_model(8, 5, 3, seed=7)
            config = TrainConfig(batch_size=4, max_steps=60, seed=21)
            model, losses = train(model, vectors, sample_batch, config)
            runs.append((losses, model))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(runs[0][1], name), getattr(runs[1][1], name))

    def test_divergence_raises_with_step(self):
        vectors, sample_batch = cluster_problem(seed=5)
        model = init_model(8, 4, 3, seed=0)
        config = TrainConfig(batch_size=4, learning_rate=1e8, max_steps=200)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged) as info:
                train(model, vectors, sample_batch, config)
        assert 0 <= info.value.step < 200

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=3)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(max_steps=0)


class TestPairAccuracy:
    def test_zero_model_predicts_class_zero(self):
        model = zero_head_model()
        rng = np.random.default_rng(29)
        vectors = rng.normal(size=(10, 4))
        pairs = [(0, 1, 0), (2, 3, 0), (4, 5, 1), (6, 7, 1)]
        # argmax of (0, 0) is index 0, so exactly the label-0 pairs score
        assert pair_accuracy(model, vectors, pairs) == 0.5


class TestCheckpointIO:
    def test_round_trip_bit_exact(self, tmp_path):
        model = init_model(6, 5, 4, seed=11)
        path = tmp_path / "model.gcem"
        save_model(path, model)
        back = load_model(path)
        for name in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(back, name), getattr(model, name))

    def test_header_layout(self, tmp_path):
        model = init_model(6, 5, 4, seed=12)
        path = tmp_path / "model.gcem"
        save_model(path, model)
        raw = path.read_bytes()
        assert raw[:4] == b"GCEM"
        dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "little") for i in range(3)]
        assert dims == [6, 5, 4]

    def test_truncated_checkpoint_rejected(self, tmp_path):
        model = init_model(3, 2, 2)
        path = tmp_path / "model.gcem"
        save_model(path, model)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_model(path)
