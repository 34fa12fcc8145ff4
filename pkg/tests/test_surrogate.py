import numpy as np
import pytest

from oracles import central_diff, rel_err
from xdex import kernels
from xdex.eigengrasp import synthetic_poses
from xdex.formats import FormatError
from xdex.retarget import RetargetConfig
from xdex.surrogate import (MLP_MAGIC, RetargetDataset, TrainingDivergedError, TrainRecipe,
                            default_layer_dims, generate_training_set, init_params, load_params,
                            mlp_backward, mlp_forward, n_parameters, params_from_bytes, predict,
                            save_params, train)

TINY = (45, 8, 8, 8, 4)


def tiny_params(seed, lower=-1e3, upper=1e3, dims=TINY):
    rng = np.random.default_rng(seed)
    p = init_params(dims, np.full(dims[-1], lower), np.full(dims[-1], upper), seed=seed,
                    dtype="float64")
    p.flat[:] = rng.normal(0, 0.5, p.flat.size)
    return p


# labeling


def test_identical_poses_identical_labels(four):
    pose = synthetic_poses(1, seed=1)
    ds = generate_training_set(four, np.repeat(pose, 5, axis=0))
    assert np.all(ds.labels == ds.labels[0])


def test_labels_feasible(four):
    ds = generate_training_set(four, synthetic_poses(1000, seed=2))
    assert np.all(np.isfinite(ds.labels))
    assert np.all((ds.labels >= four.lower) & (ds.labels <= four.upper))


def test_labeling_deterministic_and_parallel_invariant(five):
    P = synthetic_poses(40, seed=3)
    a = generate_training_set(five, P)
    b = generate_training_set(five, P, jobs=2)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.inputs, b.inputs)


def test_labels_ignore_smoothness(four):
    P = synthetic_poses(10, seed=4)
    a = generate_training_set(four, P, RetargetConfig(smoothness_weight=5.0))
    b = generate_training_set(four, P, RetargetConfig(smoothness_weight=0.0))
    assert np.array_equal(a.labels, b.labels)


def test_empty_dataset():
    with pytest.raises(ValueError):
        RetargetDataset(np.zeros((0, 45)), np.zeros((0, 8)))


# forward / backward


def test_zero_params_output_is_clamped_zero(four):
    p = init_params(default_layer_dims(8), four.lower, four.upper)
    p.flat[:] = 0
    assert np.array_equal(predict(p, np.ones((3, 45))), np.tile(np.clip(0, four.lower, four.upper), (3, 1)))


def test_single_layer_identity():
    p = init_params((45, 6), np.zeros(6), np.ones(6), dtype="float64")
    p.flat[:] = 0
    p.weights[0][:6, :6] = np.eye(6)
    X = np.random.default_rng(0).normal(size=(4, 45))
    assert np.array_equal(mlp_forward(p, X, clamp_output=False), X[:, :6])


def test_rows_independent():
    p = tiny_params(1)
    out = mlp_forward(p, np.tile(np.linspace(-1, 1, 45), (7, 1)))
    assert np.all(out == out[0])


def test_dimension_mismatch():
    p = tiny_params(1)
    with pytest.raises(ValueError):
        mlp_forward(p, np.zeros((2, 44)))
    with pytest.raises(ValueError):
        mlp_backward(p, np.zeros((2, 45)), np.zeros((2, 3)))


@pytest.mark.parametrize("limits", [(-1e3, 1e3), (-0.5, 0.5)])
def test_gradient_finite_difference(limits):
    worst = 0.0
    for seed in range(20):
        p = tiny_params(seed, *limits)
        rng = np.random.default_rng(100 + seed)
        X = rng.normal(size=(6, 45))
        Y = rng.normal(0, 0.3, size=(6, 4))
        _, g = mlp_backward(p, X, Y)
        flat0 = p.flat.copy()

        def loss(v):
            p.flat[:] = v
            return mlp_backward(p, X, Y)[0]

        fd = central_diff(loss, flat0, 1e-5)
        p.flat[:] = flat0
        worst = max(worst, rel_err(g, fd))
    assert worst < 1e-4


def test_gradient_zero_at_labels():
    p = tiny_params(3)
    X = np.random.default_rng(3).normal(size=(10, 45))
    _, g = mlp_backward(p, X, mlp_forward(p, X))
    assert np.max(np.abs(g)) < 1e-12


# optimizer


def test_adam_matches_textbook():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=50)
    grads = rng.normal(size=(5, 50))
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    ref, m, v = p0.copy(), np.zeros(50), np.zeros(50)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    for update in (kernels.adam_update_numba, kernels.adam_update_numpy):
        p, m1, m2 = p0.copy(), np.zeros(50), np.zeros(50)
        for t, g in enumerate(grads, 1):
            update(p, g, m1, m2, lr, b1, b2, eps, t)
        assert np.allclose(p, ref, rtol=1e-12, atol=1e-14)


# training


def test_linear_target_is_learned():
    rng = np.random.default_rng(7)
    X = rng.normal(0, 0.3, size=(20_000, 45))
    A = rng.normal(0, 0.2, size=(45, 4))
    Y = X @ A
    lo, hi = Y.min(axis=0) - 1, Y.max(axis=0) + 1
    ds = RetargetDataset(X, Y, "linear", lo, hi)
    dims = (45, 128, 4)
    recipe = TrainRecipe(epochs=40, dtype="float64", batch_size=64)
    res = train(ds, recipe, seed=0, layer_dims=dims)
    init = init_params(dims, lo, hi, seed=0, dtype="float64")
    initial = np.mean((mlp_forward(init, X[res.val_index]) - Y[res.val_index]) ** 2)
    assert res.val_loss[-1] <= 1e-4 * initial


def test_zero_epochs_rejected():
    with pytest.raises(ValueError):
        TrainRecipe(epochs=0)


def test_training_deterministic(four):
    ds = generate_training_set(four, synthetic_poses(300, seed=5))
    recipe = TrainRecipe(epochs=3)
    a = train(ds, recipe, seed=9, layer_dims=(45, 32, 32, 8))
    b = train(ds, recipe, seed=9, layer_dims=(45, 32, 32, 8))
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert np.array_equal(a.params.flat, b.params.flat)


def test_divergence_reports_epoch():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(64, 45))
    ds = RetargetDataset(X, rng.normal(size=(64, 4)), "x", np.full(4, -1e30), np.full(4, 1e30))
    with pytest.raises(TrainingDivergedError) as exc:
        train(ds, TrainRecipe(epochs=50, learning_rate=1e36, batch_size=8), layer_dims=(45, 16, 4))
    assert exc.value.epoch >= 1


def test_predictions_feasible(four):
    p = init_params(default_layer_dims(8), four.lower, four.upper, seed=2)
    p.flat *= 50
    out = predict(p, synthetic_poses(200, seed=1))
    assert np.all((out >= four.lower) & (out <= four.upper))


# weights files


@pytest.mark.parametrize("suffix", [".json", ".bin"])
def test_weights_round_trip(tmp_path, suffix):
    p = init_params((45, 16, 16, 5), -np.ones(5), np.ones(5), seed=4, hand_tag="h5")
    path = tmp_path / f"w{suffix}"
    save_params(path, p)
    q = load_params(path)
    assert q.layer_dims == p.layer_dims and q.hand_tag == "h5"
    assert np.array_equal(q.flat, p.flat)
    assert np.array_equal(q.lower, p.lower) and np.array_equal(q.upper, p.upper)
    if suffix == ".bin":
        assert path.read_bytes()[:8] == MLP_MAGIC


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"NOTMAGIC" + bytes(20))
    with pytest.raises(FormatError, match="XDEXMLP1"):
        load_params(path)
    with pytest.raises(FormatError):
        params_from_bytes(b"NOTMAGIC")


def test_parameter_count():
    assert n_parameters(default_layer_dims(8)) == 45 * 512 + 512 + 2 * (512 * 512 + 512) + 512 * 8 + 8
