import numpy as np
import pytest

from shapediff.ddk import DiffusionSchedule, Mode, Trajectory, run_trajectory
from shapediff.ddm import (CheckpointError, OptimizerState, TrainConfig, adamw_update,
                           equispaced_subsequence, load_checkpoint, sample, save_checkpoint, train)
from shapediff.network import Hyperparams, RegressorModel
from shapediff.regularizers import RegularizerWeights, chamfer
from shapediff.synthetic import ellipsoid_points, fibonacci_sphere

HP = Hyperparams(width=16, embed_dim=8, T=10)


def toy_trajectory(T=10, i=5, n=24, seed=0):
    rng = np.random.default_rng(seed)
    base = fibonacci_sphere(n)
    frames = [base.with_vertices(base.vertices * (1 + 0.05 * t) + rng.normal(scale=0.01, size=(n, 3)))
              for t in range(T + 1)]
    return Trajectory(frames, DiffusionSchedule.constant(T, 0.0, interval_i=i))


def test_train_config_validation():
    for bad in (dict(iterations=0), dict(batch_size=0), dict(lr=0), dict(weight_decay=-1),
                dict(lr_schedule="step")):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_cosine_schedule():
    c = TrainConfig(iterations=100, lr=1.0)
    assert c.lr_at(0) == 1.0
    assert c.lr_at(50) == pytest.approx(0.5)
    assert c.lr_at(100) == pytest.approx(0.0)
    assert TrainConfig(iterations=10, lr=0.3, lr_schedule="constant").lr_at(7) == 0.3


def test_defaults_are_the_tabulated_ones():
    c = TrainConfig()
    assert (c.iterations, c.batch_size, c.lr, c.weight_decay, c.lr_schedule) == (100_000, 32, 2e-4, 1e-6, "cosine")


def test_adamw_matches_reference_loop(rng):
    cfg = TrainConfig(iterations=10, weight_decay=0.1)
    theta = rng.standard_normal(5)
    ref = theta.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = OptimizerState()
    for k in range(1, 4):
        g = rng.standard_normal(5)
        adamw_update(theta, g, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat, vhat = m / (1 - 0.9 ** k), v / (1 - 0.999 ** k)
        ref = ref - 0.01 * 0.1 * ref - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.allclose(theta, ref, rtol=1e-14, atol=1e-15)
    assert state.iteration == 3


def test_equispaced_subsequence():
    tr = toy_trajectory(T=500, i=50, n=4)
    sub = equispaced_subsequence(tr)
    assert len(sub) == 11
    assert [t for _, t in sub] == list(range(500, -1, -50))
    with pytest.raises(ValueError):
        equispaced_subsequence(tr, 7)


def test_training_reduces_loss():
    tr = toy_trajectory()
    res = train(RegressorModel(HP), [tr], TrainConfig(iterations=300, batch_size=2, lr=3e-3))
    first = np.mean([h[1] for h in res.history[:10]])
    last = np.mean([h[1] for h in res.history[-10:]])
    assert last < 0.2 * first


def test_single_pair_overfit():
    pair = Trajectory([ellipsoid_points(64), fibonacci_sphere(64)], DiffusionSchedule.constant(1, 0.0))
    m = RegressorModel(Hyperparams(width=16, embed_dim=8, T=1))
    res = train(m, [pair], TrainConfig(iterations=2000, batch_size=1, lr=1e-2))
    assert res.history[-1][1] < 1e-3 * res.history[0][1]


def test_train_is_deterministic():
    tr = toy_trajectory()
    cfg = TrainConfig(iterations=40, batch_size=2, lr=1e-3, seed=3)
    a = train(RegressorModel(HP), [tr], cfg)
    b = train(RegressorModel(HP), [tr], cfg)
    assert np.array_equal(a.model.theta, b.model.theta)
    assert a.history == b.history


def test_resume_equals_uninterrupted(tmp_path):
    tr = toy_trajectory()
    cfg = TrainConfig(iterations=30, batch_size=2, lr=1e-3, seed=1)
    full = train(RegressorModel(HP), [tr], cfg)

    class Stop(Exception):
        pass

    # interrupt a 30-iteration run after 12 optimiser updates
    m = RegressorModel(HP)
    state = OptimizerState()
    part_cfg = TrainConfig(iterations=30, batch_size=2, lr=1e-3, seed=1)
    from shapediff import ddm
    orig = ddm.adamw_update

    def limited(theta, grad, st, lr, c):
        if st.iteration >= 12:
            raise Stop
        orig(theta, grad, st, lr, c)

    ddm.adamw_update = limited
    try:
        with pytest.raises(Stop):
            train(m, [tr], part_cfg, state=state)
    finally:
        ddm.adamw_update = orig
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, m, state)
    m2, st2, _ = load_checkpoint(path)
    assert st2.iteration == 12
    rest = train(m2, [tr], part_cfg, state=st2)
    assert len(rest.history) == 18
    assert np.array_equal(rest.model.theta, full.model.theta)


def test_train_rejects_mixed_intervals():
    with pytest.raises(ValueError, match="intervals"):
        train(RegressorModel(HP), [toy_trajectory(i=5), toy_trajectory(i=2)], TrainConfig(iterations=1))


def test_train_rejects_too_long_trajectories():
    with pytest.raises(ValueError):
        train(RegressorModel(Hyperparams(width=16, embed_dim=8, T=5)), [toy_trajectory()],
              TrainConfig(iterations=1))


def test_sample_step_count():
    m = RegressorModel(Hyperparams(width=8, embed_dim=8, T=500))
    tpl = fibonacci_sphere(16)
    res = sample(m, tpl, DiffusionSchedule.constant(500, 0.05, interval_i=50), np.random.default_rng(0))
    assert res.model_calls == 10
    assert [t for _, t in res.frames] == list(range(500, -1, -50))


def test_untrained_model_beta_zero_returns_template():
    m = RegressorModel(HP)
    tpl = fibonacci_sphere(16)
    res = sample(m, tpl, DiffusionSchedule.constant(10, 0.0, interval_i=5), np.random.default_rng(0))
    assert np.array_equal(res.shape.vertices, tpl.vertices)


def test_sampling_is_deterministic():
    m = RegressorModel(HP, np.random.default_rng(0).normal(scale=0.1, size=HP.n_params()))
    tpl = fibonacci_sphere(16)
    sch = DiffusionSchedule.constant(10, 0.05, interval_i=5)
    a = sample(m, tpl, sch, np.random.default_rng(7)).shape.vertices
    b = sample(m, tpl, sch, np.random.default_rng(7)).shape.vertices
    assert np.array_equal(a, b)


def test_single_trajectory_imitation():
    src = ellipsoid_points(128)
    tpl = fibonacci_sphere(128)
    sched = DiffusionSchedule.constant(20, 0.0, interval_i=5, mode=Mode.TEMPLATE_DESCENT)
    tr = run_trajectory(src, tpl, RegularizerWeights(lambda_c=1, lambda_p=0.01, eta=0.05, reduction="sum"), sched)
    m = RegressorModel(Hyperparams(width=32, embed_dim=16, T=20))
    train(m, [tr], TrainConfig(iterations=1500, batch_size=2, lr=3e-3))
    out = sample(m, tpl, sched, np.random.default_rng(0)).shape
    assert chamfer(out, tr.frames[0]) < 0.1 * chamfer(tpl, tr.frames[0])


def test_checkpoint_roundtrip(tmp_path):
    m = RegressorModel(HP, np.random.default_rng(1).normal(size=HP.n_params()))
    st = OptimizerState(7, np.arange(HP.n_params(), dtype=float), np.ones(HP.n_params()))
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, m, st, {"T": 10})
    m2, st2, extra = load_checkpoint(p, expect=HP)
    assert np.array_equal(m2.theta, m.theta) and np.array_equal(m2.encoder, m.encoder)
    assert st2.iteration == 7 and np.array_equal(st2.m, st.m) and np.array_equal(st2.v, st.v)
    assert extra == {"T": 10}
    save_checkpoint(tmp_path / "again.ckpt", m2, st2, {"T": 10})
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, RegressorModel(HP))
    blob = bytearray(p.read_bytes())
    blob[-1] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(p)
    (tmp_path / "x.ckpt").write_bytes(b"hello\nworld\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_checkpoint_rejects_mismatched_hyperparams(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, RegressorModel(HP))
    with pytest.raises(CheckpointError, match="hyperparams"):
        load_checkpoint(p, expect=Hyperparams(width=32, embed_dim=8, T=10))


def test_non_finite_loss_aborts():
    tr = toy_trajectory()
    m = RegressorModel(HP)
    m.theta[-3:] = 1e200
    with pytest.raises((ArithmeticError, FloatingPointError)):
        with np.errstate(all="ignore"):
            train(m, [tr], TrainConfig(iterations=2))
