import math

import numpy as np
import pytest

from thermovi.autodiff import as_tensor, grad_params
from thermovi.core import SO3, THERMAL, TrajectoryDataset
from thermovi.errors import ConfigError, NonfiniteLoss
from thermovi.integrators import simulate_so3, simulate_thermal
from thermovi.training import (
    GAUGE_WARNING,
    AdamState,
    ModelSet,
    TrainConfig,
    adam_step,
    fields_from_models,
    generate_dataset,
    learning_rate,
    loss_so3,
    loss_t,
    loss_thermal,
    preset,
    train,
)


def scheme_dataset(system, n_traj=4, traj_len=6, h=0.1, seed=0):
    """Pairs produced by the variational integrator itself, so the exact model has zero residual."""
    rng = np.random.default_rng(seed)
    start, end, ids = [], [], []
    for i in range(n_traj):
        a0 = system.observable(system.sample_phase(rng))
        if system.kind == SO3:
            Y = simulate_so3(system.G, system.forces, a0, h, traj_len - 1)
        else:
            Y = simulate_thermal(system.G, system.forces, a0, h, traj_len - 1, system.n_q)
        start.append(Y[:-1])
        end.append(Y[1:])
        ids.append(np.full(traj_len - 1, i))
    kind = SO3 if system.kind == SO3 else THERMAL
    return TrajectoryDataset(kind, system.n_q, system.n_T, np.vstack(start), np.vstack(end),
                             np.full(len(np.vstack(start)), h), np.concatenate(ids))


@pytest.fixture(scope="module")
def piston_data():
    from thermovi.systems import Piston
    return generate_dataset(Piston(), 3, 6, 0.1, seed=0)


@pytest.fixture(scope="module")
def rigid_data():
    from thermovi.systems import RigidBody
    return generate_dataset(RigidBody(), 3, 6, 0.1, seed=0)


@pytest.mark.parametrize("n_traj, traj_len, pairs", [(3, 21, 60), (2, 2, 2)])
def test_dataset_size(piston, n_traj, traj_len, pairs):
    d = generate_dataset(piston, n_traj, traj_len, 0.1, seed=1)
    assert len(d) == pairs and d.start.shape == (pairs, 4)
    assert d.meta["n_traj"] == n_traj and d.meta["seed"] == 1


def test_dataset_size_formula():
    # the paper-scale sizes follow n_traj * (traj_len - 1)
    for system, n in (("piston", 200), ("rigid_body", 100)):
        cfg = preset("paper", system, "learn_F")
        assert cfg.n_traj == n and cfg.n_traj * (cfg.traj_len - 1) == {200: 4000, 100: 2000}[n]


def test_dataset_is_reproducible(piston):
    d1 = generate_dataset(piston, 2, 4, 0.1, seed=5)
    d2 = generate_dataset(piston, 2, 4, 0.1, seed=5)
    assert np.array_equal(d1.start, d2.start) and np.array_equal(d1.end, d2.end)


def test_dataset_chains(piston_data):
    from thermovi.core import validate_dataset
    assert validate_dataset(piston_data) == []


@pytest.mark.parametrize("name", ["piston", "rigid"])
def test_zero_loss_fixpoint(name, piston, rigid):
    system = piston if name == "piston" else rigid
    d = scheme_dataset(system)
    loss = loss_thermal(system.G, system.forces, d) if name == "piston" else loss_so3(system.G, system.forces, d)
    assert loss < 1e-18


def test_loss_kind_is_checked(piston_data, rigid_data, piston):
    with pytest.raises(ValueError):
        loss_so3(piston.G, piston.forces, piston_data)
    with pytest.raises(ValueError):
        loss_thermal(piston.G, piston.forces, rigid_data)


def test_loss_is_positive_on_exact_data(piston, piston_data):
    # exact trajectories do not satisfy the discrete scheme exactly
    assert loss_thermal(piston.G, piston.forces, piston_data) > 1e-6


def test_loss_scale_invariance(piston, piston_data):
    k = 1.7
    l1 = loss_thermal(piston.G, piston.forces, piston_data)
    l2 = loss_thermal(lambda q, v, T: k * piston.G(q, v, T), lambda q, v, T: k * piston.forces(q, v, T), piston_data)
    assert l2 == pytest.approx(k * k * l1, rel=1e-12)


def test_loss_affine_invariance(piston, piston_data):
    l1 = loss_thermal(piston.G, piston.forces, piston_data)

    def G2(q, v, T):
        return piston.G(q, v, T) + 3.0 - 0.4 * T[:, 0] + 1.1 * T[:, 1] + 0.6 * v[:, 0]

    assert loss_thermal(G2, piston.forces, piston_data) == pytest.approx(l1, rel=1e-10)


def test_loss_coordinate_temperature_shift(piston):
    # the shift is exact on pairs with zero velocity residual, which the scheme's own data has
    d = scheme_dataset(piston)
    alpha = as_tensor([0.5, -0.3])

    def G2(q, v, T):
        return piston.G(q, v, T) + (T * alpha).sum(1) * q[:, 0]

    def F2(q, v, T):
        return piston.forces(q, v, T) - (T * alpha).unsqueeze(-1)

    assert loss_thermal(G2, F2, d) < 1e-18


def test_so3_loss_temperature_shift(rigid, rigid_data):
    l1 = loss_so3(rigid.G, rigid.forces, rigid_data)
    l2 = loss_so3(lambda Om, T: rigid.G(Om, T) - 2.0 + 0.7 * T[:, 0], rigid.forces, rigid_data)
    assert l2 == pytest.approx(l1, rel=1e-10)


def test_adam_zero_gradient():
    p, st = adam_step(np.ones(3), np.zeros(3), AdamState.zeros(3), 0.1)
    assert np.array_equal(p, np.ones(3)) and st.t == 1


def test_adam_first_step_has_size_lr():
    p, _ = adam_step(np.zeros(2), np.array([1e3, -1e-3]), AdamState.zeros(2), 0.01)
    assert np.allclose(p, [-0.01, 0.01], rtol=1e-4)


def test_adam_minimizes_quadratic():
    p, st = np.array([5.0]), AdamState.zeros(1)
    for _ in range(3000):
        p, st = adam_step(p, 2 * (p - 1.0), st, 0.01)
    assert abs(p[0] - 1.0) < 1e-3


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.zeros(2), 0.1)


def test_learning_rate_schedule():
    cfg = TrainConfig(epochs=11, lr_init=1e-2, lr_final=1e-4)
    assert learning_rate(cfg, 0) == 1e-2
    assert learning_rate(cfg, 10) == pytest.approx(1e-4, rel=1e-12)
    assert learning_rate(cfg, 5) == pytest.approx(1e-3, rel=1e-12)


def test_config_errors():
    with pytest.raises(ConfigError):
        TrainConfig(regime="learn_H")
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-3, lr_final=1e-2)
    with pytest.raises(ConfigError):
        TrainConfig(traj_len=1)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3, "momentum": 0.9})
    with pytest.raises(ConfigError):
        preset("huge")
    cfg = TrainConfig(epochs=3, hidden=[4, 4])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_model_set_sizes(piston, rigid):
    assert ModelSet(piston, "learn_F").sizes == [1345, 1345]
    assert ModelSet(piston, "learn_G").sizes == [1345]
    assert ModelSet(rigid, "learn_F").sizes == [1470]


def test_model_set_rigid_both(rigid):
    ms = ModelSet(rigid, "learn_both")
    assert [c.name for c in ms.components] == ["G", "f"]
    assert ms.n_params == 1345 + 1470


def test_models_round_trip_fields(piston, piston_data):
    ms = ModelSet(piston, "learn_F", hidden=(5,))
    theta = ms.init(3)
    G1, F1 = ms.fields(theta)
    G2, F2 = fields_from_models(piston, ms.models(theta))
    assert loss_thermal(G1, F1, piston_data) == loss_thermal(G2, F2, piston_data)


def _quick(**kw):
    base = dict(system="piston", regime="learn_F", epochs=30, lr_init=1e-2, lr_final=1e-3, hidden=(6,),
                checkpoint_every=10)
    return TrainConfig(**{**base, **kw})


def test_training_reduces_loss(piston_data):
    rep = train(_quick(epochs=60), piston_data)
    assert rep.best_loss < rep.loss_history[0]
    assert len(rep.loss_history) == 60 and len(rep.lr_history) == 60
    assert rep.grad_check["max_rel_err"] < 1e-5
    assert set(rep.models) == {"F1", "F2"}


def test_rigid_learn_G_runs(rigid_data):
    rep = train(_quick(system="rigid_body", regime="learn_G"), rigid_data)
    assert rep.best_loss < rep.loss_history[0] and set(rep.models) == {"G"}


def test_training_is_deterministic(piston_data):
    r1 = train(_quick(), piston_data, grad_check=False)
    r2 = train(_quick(), piston_data, grad_check=False)
    assert r1.loss_history == r2.loss_history and np.array_equal(r1.final_params, r2.final_params)


class Interrupt(Exception):
    pass


def test_checkpoint_resume_is_bitwise(tmp_path, piston_data):
    cfg = _quick(epochs=40, checkpoint_every=20)
    full = train(cfg, piston_data, grad_check=False)

    def stop(msg):
        if msg.startswith("epoch     20"):
            raise Interrupt

    ck = tmp_path / "ck.json"
    with pytest.raises(Interrupt):
        train(cfg, piston_data, checkpoint=ck, grad_check=False, log=stop)
    resumed = train(cfg, piston_data, checkpoint=ck, resume=True, grad_check=False)
    assert resumed.loss_history == full.loss_history
    assert np.array_equal(resumed.final_params, full.final_params)
    assert np.array_equal(resumed.params, full.params)


def test_minibatch_resume_is_bitwise(tmp_path, piston_data):
    # the batch sampler state is part of the checkpoint
    cfg = _quick(epochs=20, batch=4, checkpoint_every=10)
    full = train(cfg, piston_data, grad_check=False)

    def stop(msg):
        if msg.startswith("epoch     10"):
            raise Interrupt

    ck = tmp_path / "ck.json"
    with pytest.raises(Interrupt):
        train(cfg, piston_data, checkpoint=ck, grad_check=False, log=stop)
    resumed = train(cfg, piston_data, checkpoint=ck, resume=True, grad_check=False)
    assert resumed.loss_history == full.loss_history
    assert np.array_equal(resumed.final_params, full.final_params)
    again = train(cfg, piston_data, checkpoint=ck, resume=True, grad_check=False)
    assert np.array_equal(again.final_params, full.final_params)


def test_learn_both_warns(piston_data):
    with pytest.warns(UserWarning, match="invariant"):
        rep = train(_quick(regime="learn_both", epochs=2), piston_data, grad_check=False)
    assert rep.warnings == [GAUGE_WARNING]


def test_zero_epochs_keeps_initial(piston_data, piston):
    rep = train(_quick(epochs=0), piston_data, grad_check=False)
    ms = ModelSet(piston, "learn_F", hidden=(6,))
    assert np.array_equal(rep.params, ms.init(0)) and rep.best_epoch == -1 and rep.loss_history == []
    assert math.isfinite(rep.best_loss)


def test_nonfinite_loss(piston_data):
    cfg = _quick(epochs=5, lr_init=1e300, lr_final=1e300)
    with pytest.raises(NonfiniteLoss) as err:
        train(cfg, piston_data, grad_check=False)
    assert err.value.last_good is not None and np.all(np.isfinite(err.value.last_good))


def test_dataset_system_mismatch(rigid_data):
    with pytest.raises(ConfigError):
        train(_quick(), rigid_data)


def test_gradient_of_loss_matches_fd(piston_data, piston):
    ms = ModelSet(piston, "learn_F", hidden=(2,))
    theta = ms.init(0)
    sub = piston_data.subset(np.arange(10))

    def loss(p):
        G, F = ms.fields(p)
        return loss_t(G, F, sub)

    g = grad_params(loss, theta)
    eps = 1e-6
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        fd = (float(loss(as_tensor(theta + e)).detach()) - float(loss(as_tensor(theta - e)).detach())) / (2 * eps)
        assert abs(fd - g[i]) <= 1e-6 * max(abs(g[i]), abs(fd), 1e-8)
