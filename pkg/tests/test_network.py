import numpy as np
import pytest

import oracles
from shapediff.network import (EmbeddingError, Hyperparams, RegressorModel, model_forward,
                               time_embedding, training_loss)

TINY = Hyperparams(width=8, embed_dim=8, T=50)


def random_model(hp, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    return RegressorModel(hp, rng.normal(scale=scale, size=hp.n_params()))


def test_time_embedding_values():
    e = time_embedding(25, 50, 4)
    assert e.shape == (4,)
    # frequencies 1 and 50 at s = 0.5
    assert np.allclose(e, [np.sin(0.5), np.cos(0.5), np.sin(25.0), np.cos(25.0)])


def test_time_embedding_distinguishes_steps():
    e = time_embedding(np.arange(0, 501), 500, 64)
    assert len(np.unique(e.round(12), axis=0)) == 501


def test_time_embedding_errors():
    with pytest.raises(EmbeddingError):
        time_embedding(1, 10, 3)
    with pytest.raises(EmbeddingError):
        time_embedding(11, 10, 4)
    with pytest.raises(EmbeddingError):
        time_embedding(-1, 10, 4)


def test_fresh_model_is_identity(rng):
    m = RegressorModel(Hyperparams(width=16, embed_dim=8, T=10))
    X = rng.standard_normal((20, 3))
    assert np.all(model_forward(m, X, 5) == 0)


@pytest.mark.parametrize("hp", [
    TINY,
    Hyperparams(width=8, embed_dim=8, heads=2, T=50),
    Hyperparams(width=8, embed_dim=8, latent_dim=8, T=50),
    Hyperparams(width=8, embed_dim=8, time_conditioning=False, T=50),
], ids=["base", "heads2", "latent", "no-time"])
def test_forward_matches_straight_line_evaluator(rng, hp):
    m = random_model(hp, 1)
    X = rng.standard_normal((5, 3))
    lat = m.latent(rng.standard_normal((7, 3))) if hp.latent_dim else None
    got = model_forward(m, X, 17, lat)
    want = oracles.model_offsets(m.params, hp, X, 17, lat)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_permutation_equivariance(rng):
    m = random_model(Hyperparams(width=16, embed_dim=8, T=50), 2)
    X = rng.standard_normal((30, 3))
    perm = rng.permutation(30)
    a = model_forward(m, X, 3)[perm]
    b = model_forward(m, X[perm], 3)
    assert np.allclose(a, b, rtol=0, atol=1e-12)


def test_batched_equals_single(rng):
    m = random_model(TINY, 3)
    X = rng.standard_normal((4, 6, 3))
    t = np.array([1, 5, 9, 50])
    batch = m.forward(X, t)
    for b in range(4):
        assert np.allclose(batch[b], m.forward(X[b], t[b]), atol=1e-13)


def test_latent_required_when_configured(rng):
    m = random_model(Hyperparams(width=8, embed_dim=8, latent_dim=8, T=5), 0)
    with pytest.raises(ValueError):
        m.forward(rng.standard_normal((4, 3)), 1)


def test_latent_is_permutation_invariant(rng):
    m = random_model(Hyperparams(width=8, embed_dim=8, latent_dim=8, T=5), 0)
    X = rng.standard_normal((12, 3))
    assert np.allclose(m.latent(X), m.latent(X[::-1]), rtol=0, atol=1e-12)


def test_loss_zero_at_identity(rng):
    m = RegressorModel(TINY)
    X = rng.standard_normal((9, 3))
    loss, grad = training_loss(m, X, X, 4)
    assert loss == 0 and np.all(grad == 0)


def test_loss_value(rng):
    m = random_model(TINY, 4)
    X, Y = rng.standard_normal((2, 9, 3))
    loss, _ = training_loss(m, X, Y, 4)
    r = X + oracles.model_offsets(m.params, TINY, X, 4) - Y
    assert loss == pytest.approx(float((r * r).sum()), rel=1e-12)


def fd_check(m, X, Y, t, lat=None, h=1e-4):
    loss, grad = training_loss(m, X, Y, t, lat)

    def f(theta):
        m.theta[:] = theta
        return training_loss(m, X, Y, t, lat)[0]

    theta0 = m.theta.copy()
    fd = oracles.fd_gradient(f, theta0, h)
    m.theta[:] = theta0
    floor = 1e-6 * max(1.0, abs(loss))
    return (np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), floor)).max()


@pytest.mark.parametrize("hp", [
    Hyperparams(width=8, embed_dim=8, heads=2, T=50),
    Hyperparams(width=8, embed_dim=8, latent_dim=8, T=50),
    Hyperparams(width=8, embed_dim=8, time_conditioning=False, T=50),
], ids=["heads2", "latent", "no-time"])
def test_gradient_variants(rng, hp):
    m = random_model(hp, 5)
    X, Y = rng.standard_normal((2, 3, 6, 3))
    lat = np.stack([m.latent(rng.standard_normal((6, 3))) for _ in range(3)]) if hp.latent_dim else None
    assert fd_check(m, X, Y, np.array([1, 20, 50]), lat) < 1e-3


def test_checkpoint_shape_errors():
    with pytest.raises(ValueError):
        RegressorModel(TINY, np.zeros(3))
    with pytest.raises(ValueError):
        Hyperparams(width=7)
