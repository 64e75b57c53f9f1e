import json

import numpy as np
import pytest

from nbvgrasp import sampler as S
from nbvgrasp.liegroup import GraspPose, se3_exp
from nbvgrasp.trainer import noise_schedule
from nbvgrasp.world import WORKSPACE_HI, WORKSPACE_LO

G0 = se3_exp(np.array([0.1, -0.05, 0.3, 0.2, 0.1, -0.3]))


def test_schedule_shape_and_ratio():
    sch = S.make_schedule(150)
    assert len(sch) == 150 and np.all(np.diff(sch.sigmas) < 0)
    assert np.isclose(sch.sigma_min, noise_schedule(1e-3))
    assert np.allclose(sch.alphas / sch.sigmas, sch.alphas[-1] / sch.sigmas[-1])
    assert np.isclose(sch.alphas[-1] ** 2, 0.3 * sch.sigma_min**2)
    explicit = S.make_schedule(10, eps0=2e-4)
    assert np.isclose(explicit.alphas[-1] ** 2, 2e-4)


@pytest.mark.parametrize("kw", [{"n_steps": 1}, {"eps0": 0.0}, {"eps0": -1.0}])
def test_schedule_rejects(kw):
    with pytest.raises(ValueError):
        S.make_schedule(**kw)


def test_schedule_validation():
    with pytest.raises(ValueError):
        S.AnnealSchedule(np.array([0.1, 0.2]), np.array([0.1, 0.1]))
    with pytest.raises(ValueError):
        S.AnnealSchedule(np.array([0.1]), np.array([0.1, 0.1]))
    with pytest.raises(ValueError):
        S.AnnealSchedule.constant(3, 0.1, 0.0)


def test_step_with_zero_noise_is_gradient_descent():
    E = S.QuadraticEnergy(G0, 0.1)
    g = S.initial_poses([np.random.default_rng(i) for i in range(4)])
    alpha = 0.01
    out = S.langevin_step(g, E, 0.1, alpha, noise=np.zeros((4, 6)))
    grad = E.pose_grad(g, 0.1)
    from nbvgrasp.liegroup import retract
    expect = retract(g, -(alpha**2) * grad)
    assert np.allclose(out.as_matrix(), expect.as_matrix(), atol=1e-14)
    assert np.all(E.evaluate(out, 0.1)[1] < E.evaluate(g, 0.1)[1])


def test_exact_step_lands_on_the_mode():
    # alpha = tau and zero noise: one step solves the quadratic exactly in the linear regime
    E = S.QuadraticEnergy(G0, 0.1)
    near = se3_exp(np.full(6, 1e-4))
    from nbvgrasp.liegroup import compose
    g = compose(GraspPose(G0.rotation[None], G0.translation[None]), near[None] if near.translation.ndim == 1 else near)
    out = S.langevin_step(g, E, 0.1, 0.1, noise=np.zeros((1, 6)))
    assert np.all(E.evaluate(out, 0.1)[1] < 1e-9)


def test_dof_mask_freezes_coordinates():
    E = S.QuadraticEnergy(G0, 0.1)
    g = S.initial_poses([np.random.default_rng(3)])
    mask = np.array([1.0, 0, 0, 0, 0, 0])
    out = S.langevin_step(g, E, 0.1, 0.05, rng=0, dof_mask=mask)
    from nbvgrasp.liegroup import relative_log
    xi = relative_log(out, g)
    assert np.allclose(xi[:, 1:], 0, atol=1e-12) and abs(xi[0, 0]) > 0


def test_chains_are_independent_of_batch_size():
    E = S.QuadraticEnergy(G0, 0.2)
    sch = S.make_schedule(20)
    rngs, seeds = S.chain_rngs(5, 6)
    g_all, _ = S.run_chains(E, sch, rngs)
    solo, _ = S.run_chains(E, sch, [np.random.default_rng(int(seeds[2]))])
    assert np.allclose(g_all[2:3].as_matrix(), solo.as_matrix(), atol=1e-13)


def test_generate_is_deterministic_and_sorted():
    E = S.QuadraticEnergy(G0, 0.1)
    a = S.generate_grasps(E, 8, S.make_schedule(10), rng=11)
    b = S.generate_grasps(E, 8, S.make_schedule(10), rng=11)
    assert [c.to_record() for c in a] == [c.to_record() for c in b]
    p = [c.p_success for c in a]
    assert p == sorted(p, reverse=True)
    assert [c.chain for c in a] == list(range(8))  # ties keep chain order


class _Exploding:
    def pose_grad(self, g, sigma):
        out = np.zeros((len(g), 6))
        if len(g) == 4:  # chain 0 blows up; the survivors are fine
            out[0] = np.nan
        return out

    def evaluate(self, g, sigma):
        n = len(g)
        return np.full(n, 0.5), np.zeros(n), np.zeros(n)


def test_divergent_chains_are_dropped():
    cands = S.generate_grasps(_Exploding(), 4, S.make_schedule(3), rng=0)
    assert sorted(c.chain for c in cands) == [1, 2, 3]
    with pytest.raises(S.ChainDivergedError):
        S.langevin_step(S.initial_poses([np.random.default_rng(i) for i in range(4)]), _Exploding(), 0.1, 0.1, rng=0)


def test_stationary_moments_match_quadratic():
    tau = 0.1
    cands = S.generate_grasps(S.QuadraticEnergy(G0, tau), 400, S.AnnealSchedule.constant(30, tau, tau), rng=0)
    mean, cov = S.tangent_moments(S.candidate_poses(cands), G0)
    assert np.all(np.abs(mean) < 4 * tau / np.sqrt(400))
    assert np.allclose(np.diag(cov), tau**2, rtol=0.3)


def test_stationary_variance_formula():
    assert np.isclose(S.stationary_variance(0.1, 0.1), 0.01)
    assert np.isclose(S.stationary_variance(1.0, 1e-3), 0.5, rtol=1e-5)  # small steps: temperature 1/2
    with pytest.raises(ValueError):
        S.stationary_variance(0.1, 0.2)


def test_feasibility_and_selection():
    up = np.diag([1.0, -1.0, -1.0])  # approach axis points down
    t_in = (WORKSPACE_LO + WORKSPACE_HI) / 2 + [0, 0, 0.1]
    g = GraspPose(np.stack([up, up]), np.stack([t_in, WORKSPACE_HI + 1]))
    ok = S.feasible(g)
    assert ok[0] and not ok[1]
    mk = lambda i, p: S.GraspCandidate(g[i], p, 0.0, 0.0, i)
    assert S.select_best([mk(1, 0.9), mk(0, 0.3)]).chain == 0
    assert S.select_best([mk(0, 0.01)]) is None
    assert S.select_best([]) is None


def test_write_candidates(tmp_path):
    cands = S.generate_grasps(S.QuadraticEnergy(G0, 0.1), 3, S.make_schedule(5), rng=0)
    path = S.write_candidates(tmp_path / "c.jsonl", cands)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(rows) == 3 and len(rows[0]["pose"]) == 7 and set(rows[0]) == {"pose", "p_S", "E_S", "E_F", "chain"}


def test_network_energy_adapter(scene_setup):
    from nbvgrasp.ebm import EnergyNetwork
    _, _, si = scene_setup
    with pytest.raises(ValueError):
        S.as_energy(EnergyNetwork(seed=0))
    cands = S.generate_grasps(EnergyNetwork(seed=0), 4, S.make_schedule(4), rng=0, scene=si)
    assert len(cands) == 4 and all(0 < c.p_success < 1 for c in cands)


class _Flat:
    def pose_grad(self, g, sigma):
        return np.zeros((len(g), 6))

    def evaluate(self, g, sigma):
        n = len(g)
        return np.full(n, 0.5), np.zeros(n), np.zeros(n)


def test_zero_gradient_zero_noise_leaves_pose():
    g = S.initial_poses([np.random.default_rng(i) for i in range(3)])
    out = S.langevin_step(g, _Flat(), 0.1, 0.3, noise=np.zeros((3, 6)))
    assert np.array_equal(out.as_matrix(), g.as_matrix())


def test_constant_energy_is_brownian():
    from nbvgrasp.liegroup import relative_log

    n, alpha = 100_000, 0.05
    g = GraspPose(np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), np.zeros((n, 3)))
    out = S.langevin_step(g, _Flat(), 0.1, alpha, rng=0)
    step = relative_log(out, g)
    assert np.allclose(step.var(axis=0), alpha**2, rtol=0.02)


def test_schedule_small_cases():
    two = S.make_schedule(2, eps0=1e-3)
    assert len(two) == 2 and np.isclose(two.alphas[-1], np.sqrt(1e-3))
    assert np.all(np.diff(S.make_schedule(50).alphas) <= 0)


def test_single_chain():
    assert len(S.generate_grasps(S.QuadraticEnergy(G0, 0.1), 1, S.make_schedule(3), rng=0)) == 1


def test_permuting_chain_seeds_permutes_outputs():
    E = S.QuadraticEnergy(G0, 0.2)
    sch = S.make_schedule(10)
    _, seeds = S.chain_rngs(1, 5)
    perm = np.array([3, 0, 4, 1, 2])
    a, _ = S.run_chains(E, sch, [np.random.default_rng(int(s)) for s in seeds])
    b, _ = S.run_chains(E, sch, [np.random.default_rng(int(s)) for s in seeds[perm]])
    assert np.allclose(a[perm].as_matrix(), b.as_matrix(), atol=1e-13)


def test_success_ranking_ignores_temperature(scene_setup):
    from nbvgrasp.ebm import EnergyNetwork

    _, _, si = scene_setup
    net = EnergyNetwork(seed=2)
    g = S.initial_poses([np.random.default_rng(i) for i in range(6)])
    p1 = net.forward(g, si, 0.05).p_S
    net.store.params["tau"] = np.array(1.3)
    out = net.forward(g, si, 0.05)
    assert np.array_equal(out.p_S, p1)
