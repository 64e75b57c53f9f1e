import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbvgrasp.ebm import (
    EnergyNetwork,
    dirichlet_probs,
    effective_energy,
    noise_features,
    output_from_logits,
    rotation_tangent,
)
from nbvgrasp.liegroup import GraspPose, retract, so3_exp
from nbvgrasp.splatrep import SceneInput
from nbvgrasp.world import jitter, sdf, successful_seeds


@pytest.fixture(scope="module")
def net():
    return EnergyNetwork(seed=1)


@pytest.fixture(scope="module")
def poses(scene_setup):
    world = scene_setup[0]
    return jitter(successful_seeds(world)[:40], np.random.default_rng(0), 0.02, 0.3)


def batched_pose_fd(fn, g, h=1e-6):
    out = np.zeros((len(g), 6))
    for i in range(6):
        d = np.zeros((len(g), 6))
        d[:, i] = h
        out[:, i] = (fn(retract(g, d)) - fn(retract(g, -d))) / (2 * h)
    return out


def rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a)))


def test_zero_logits():
    out = output_from_logits(0.0, 0.0)
    assert out.p_S == out.p_F == 0.25
    assert math.isclose(out.E_S, math.log(4)) and math.isclose(out.E_F, 1.3862943611198906)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.01, 5))
def test_p_success_monotone_in_a_S(a_S, a_F, step):
    p0, _ = dirichlet_probs(a_S, a_F)
    p1, _ = dirichlet_probs(a_S + step, a_F)
    assert p1 >= p0
    pS, pF = dirichlet_probs(a_S, a_F)
    assert pS + pF < 1


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_energy_is_minus_log_p(a_S, a_F):
    out = output_from_logits(a_S, a_F)
    assert np.isclose(out.E_S, -np.log(out.p_S), rtol=1e-12)
    pS, pF = dirichlet_probs(out.a_S, out.a_F)
    assert np.isclose(pS, out.p_S, rtol=1e-14)


def test_effective_energy_temperature():
    out = output_from_logits(np.array([0.3, -1.0]), np.array([0.1, 0.5]), T=1.0)
    assert np.array_equal(effective_energy(out), out.E_S)
    hot = output_from_logits(out.a_S, out.a_F, T=2.0)
    assert np.allclose(effective_energy(hot, "F"), out.E_F / 2)
    assert np.argmin(effective_energy(hot)) == np.argmin(out.E_S)


def test_noise_features_shape():
    f = noise_features(np.array([0.1, 0.01]), 8)
    assert f.shape == (2, 16) and np.all(np.abs(f) <= 1)


def test_permutation_invariance(net, poses, scene_setup):
    si = scene_setup[2]
    rng = np.random.default_rng(3)
    pf, pb = rng.permutation(si.n_fg), rng.permutation(si.rows.shape[0] - si.n_fg)
    rows = np.concatenate([si.rows[: si.n_fg][pf], si.rows[si.n_fg :][pb]])
    shuffled = SceneInput(rows, si.kernel_index, si.n_fg)
    a, b = net.forward(poses, si, 0.05), net.forward(poses, shuffled, 0.05)
    for k in ("a_S", "a_F", "p_S", "E_S", "E_F"):
        assert np.max(np.abs(getattr(a, k) - getattr(b, k))) <= 1e-9
    sa = net.sdf_predict(si.fg_points[:20], si)
    sb = net.sdf_predict(si.fg_points[:20], shuffled)
    assert np.max(np.abs(sa - sb)) <= 1e-9


def test_outputs_finite(net, poses, scene_setup):
    out = net.forward(poses, scene_setup[2], 0.3)
    assert all(np.all(np.isfinite(getattr(out, k))) for k in ("a_S", "a_F", "E_S", "E_F"))
    assert net.temperature > 0


def test_single_pose_api(net, poses, scene_setup):
    si = scene_setup[2]
    one = net.forward(poses[0], si, 0.1)
    many = net.forward(poses[:3], si, 0.1)
    assert np.isclose(one.E_S, many.E_S[0])
    assert net.grad_energy_wrt_pose(poses[0], si, 0.1).shape == (6,)


def test_pose_gradient_200_probes(net, scene_setup):
    world, _, si = scene_setup
    rng = np.random.default_rng(4)
    seeds = successful_seeds(world)
    g = jitter(seeds[rng.integers(0, len(seeds), 200)], rng, 0.03, 0.4)
    sigma = 0.05
    for branch in ("S", "F"):
        G = net.grad_energy_wrt_pose(g, si, sigma, branch)
        key = "E_S" if branch == "S" else "E_F"
        num = batched_pose_fd(lambda x: getattr(net.forward(x, si, sigma), key) / net.temperature, g)
        assert rel(G, num) <= 1e-4


def test_forward_and_reverse_pose_gradients_agree(net, poses, scene_setup):
    si = scene_setup[2]
    a = net.grad_energy_wrt_pose(poses, si, 0.02)
    b = net.grad_energy_wrt_pose_reverse(poses, si, 0.02)
    assert np.max(np.abs(a - b)) <= 1e-10 * max(1.0, np.abs(a).max())


def test_gradient_scales_with_temperature(poses, scene_setup):
    si = scene_setup[2]
    net = EnergyNetwork(seed=2)
    g1 = net.grad_energy_wrt_pose(poses, si, 0.1)
    net.store.params["tau"] = np.array(math.log(2.0))
    g2 = net.grad_energy_wrt_pose(poses, si, 0.1)
    assert np.allclose(g2, g1 / 2, rtol=1e-12, atol=1e-15)


def test_constant_network_has_zero_gradients(poses, scene_setup):
    si = scene_setup[2]
    net = EnergyNetwork(seed=3)
    net.store.params["head.W"] = np.zeros_like(net.store["head.W"])
    assert not np.any(net.grad_energy_wrt_pose(poses, si, 0.1))
    assert not np.any(net.grad_energy_wrt_scene(poses, si, 0.1))


def test_scene_gradient_50_points(net, poses, scene_setup):
    si = scene_setup[2]
    g = poses[:8]
    sigma = 0.05
    G = net.grad_energy_wrt_scene(g, si, sigma)
    rng = np.random.default_rng(5)
    active = np.flatnonzero(np.abs(G).sum(axis=1) > 0)
    probes = rng.choice(active, size=min(50, active.size), replace=False)
    h = 1e-6
    worst = 0.0
    for j in probes:
        for k in range(3):
            pts = si.points.copy()
            pts[j, k] += h
            fp = net.forward(g, si.with_points(pts), sigma).E_S.sum()
            pts[j, k] -= 2 * h
            fm = net.forward(g, si.with_points(pts), sigma).E_S.sum()
            num = (fp - fm) / (2 * h) / net.temperature
            worst = max(worst, abs(G[j, k] - num) / max(1.0, abs(G[j, k])))
    assert worst <= 1e-4


def test_scene_vjp_weights_combine(net, poses, scene_setup):
    si = scene_setup[2]
    g = poses[:5]
    u = np.linspace(-1, 1, 5)
    both = net.scene_vjp(g, si, 0.1, energy_weights=u, prob_weights=u)
    parts = net.scene_vjp(g, si, 0.1, energy_weights=u) + net.scene_vjp(g, si, 0.1, prob_weights=u)
    assert np.allclose(both, parts, atol=1e-12)
    assert not np.any(net.scene_vjp(g, si, 0.1))


def test_rotation_tangent_fd():
    R = so3_exp(np.array([0.3, -0.5, 1.1]))
    T = rotation_tangent(R)
    h = 1e-6
    for j in range(3):
        w = np.zeros(3)
        w[j] = h
        num = (R @ so3_exp(w) - R @ so3_exp(-w)).ravel() / (2 * h)
        assert np.allclose(T[3 + j], num, atol=1e-8)
    assert not np.any(T[:3])


def test_sdf_head_shapes_and_finite(net, scene_setup):
    si = scene_setup[2]
    pts = np.random.default_rng(0).uniform(-0.2, 0.2, (7, 3))
    out = net.sdf_predict(pts, si)
    assert out.shape == (7,) and np.all(np.isfinite(out))


def test_checkpoint_roundtrip(tmp_path, net, poses, scene_setup):
    si = scene_setup[2]
    net.save(tmp_path / "m.npz")
    back = EnergyNetwork.load(tmp_path / "m.npz")
    assert back.config() == net.config()
    assert np.array_equal(back.forward(poses, si, 0.1).E_S, net.forward(poses, si, 0.1).E_S)


def test_frozen_temperature():
    net = EnergyNetwork(learn_temperature=False)
    assert "tau" in net.store.frozen and net.temperature == 1.0
