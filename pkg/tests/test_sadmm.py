import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greencmbf import cvar, sadmm
from greencmbf.errors import CmbfError, InstanceError
from greencmbf.model import check_qos
from greencmbf.scenario import SampleDatabase

from conftest import scalar_model


def dense_public(q, lam, layout, rho):
    A = np.vstack(layout.B)
    rhs = np.concatenate([qi + li / rho for qi, li in zip(q, lam)])
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def test_layout_two_cells():
    lay = sadmm.build_layout(2, 1)
    np.testing.assert_array_equal(lay.B[0], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(sum(B.T @ B for B in lay.B), 2 * np.eye(2))
    assert lay.public_index(0, 1, 0) == 0 and lay.public_index(1, 0, 0) == 1


def test_layout_dimensions():
    lay = sadmm.build_layout(3, 2)
    assert lay.n_public == 12 and lay.n_private == 6
    assert all(B.shape == (6, 12) for B in lay.B)


@pytest.mark.parametrize("I,K", list(itertools.product([2, 3, 4], [1, 2, 3])))
def test_layout_invariants(I, K):
    lay = sadmm.build_layout(I, K)
    refs = np.zeros(lay.n_public, dtype=int)
    for i, B in enumerate(lay.B):
        assert set(np.unique(B)) <= {0.0, 1.0}
        for k in range(K):
            row = B[lay.private_index(i, i, k)]
            assert row.sum() == I - 1
            assert all(row[lay.public_index(j, i, k)] == 1 for j in range(I) if j != i)
            for j in range(I):
                if j != i:
                    row = B[lay.private_index(i, j, k)]
                    assert row.sum() == 1 and row[lay.public_index(i, j, k)] == 1
        refs += (B.sum(axis=0) > 0).astype(int) * B.sum(axis=0).astype(int)
    assert np.all(refs == 2)
    M = sum(B.T @ B for B in lay.B)
    for group in lay.receiver_groups():
        np.testing.assert_array_equal(M[np.ix_(group, group)], np.eye(I - 1) + 1)
        others = np.setdiff1d(np.arange(lay.n_public), group)
        assert not M[np.ix_(group, others)].any()


def test_layout_single_cell_rejected():
    with pytest.raises(InstanceError):
        sadmm.build_layout(1, 2)


def test_public_update_example():
    lay = sadmm.build_layout(2, 1)
    q = [np.array([3.0, 5.0]), np.array([4.0, 6.0])]
    lam = [np.zeros(2), np.zeros(2)]
    np.testing.assert_allclose(sadmm.public_update(q, lam, lay, 1.0), [4.5, 4.5], atol=1e-15)


def test_public_update_fixed_point(rng):
    lay = sadmm.build_layout(3, 2)
    q0 = rng.uniform(0, 5, lay.n_public)
    q = [B @ q0 for B in lay.B]
    lam = [np.zeros(lay.n_private)] * 3
    np.testing.assert_allclose(sadmm.public_update(q, lam, lay, 1.0), q0, atol=1e-12)


def test_public_update_linear_in_duals(rng):
    lay = sadmm.build_layout(3, 1)
    q = [rng.normal(size=lay.n_private) for _ in range(3)]
    lam = [rng.normal(size=lay.n_private) for _ in range(3)]
    zero = [np.zeros(lay.n_private)] * 3
    rho = 2.5
    shift = sadmm.public_update(q, lam, lay, rho) - sadmm.public_update(q, zero, lay, rho)
    M = sum(B.T @ B for B in lay.B)
    expect = np.linalg.solve(M, sum(B.T @ l for B, l in zip(lay.B, lam)) / rho)
    np.testing.assert_allclose(shift, expect, atol=1e-12)


@settings(max_examples=60)
@given(I=st.integers(2, 4), K=st.integers(1, 3), rho=st.floats(0.01, 100), seed=st.integers(0, 2**31))
def test_public_update_matches_least_squares(I, K, rho, seed):
    rng = np.random.default_rng(seed)
    lay = sadmm.build_layout(I, K)
    q = [rng.uniform(0, 10, lay.n_private) for _ in range(I)]
    lam = [rng.normal(0, 3, lay.n_private) for _ in range(I)]
    got = sadmm.public_update(q, lam, lay, rho)
    np.testing.assert_allclose(got, dense_public(q, lam, lay, rho), atol=1e-10, rtol=0)
    # zero gradient of the public objective
    grad = sum(-B.T @ l + rho * B.T @ (B @ got - qi) for B, qi, l in zip(lay.B, q, lam))
    assert np.max(np.abs(grad)) <= 1e-9 * max(1.0, rho)


def test_public_update_rejects_rho():
    lay = sadmm.build_layout(2, 1)
    with pytest.raises(CmbfError):
        sadmm.public_update([np.zeros(2)] * 2, [np.zeros(2)] * 2, lay, 0.0)


def test_dual_update_examples():
    B = np.eye(2)
    lam = np.array([1.0, -2.0])
    np.testing.assert_array_equal(sadmm.dual_update(lam, B, np.array([3.0, 4.0]), np.array([3.0, 4.0]), 1.0), lam)
    out = sadmm.dual_update(lam, B, np.array([1.5, 0.0]), np.array([1.0, 0.5]), 1.0)
    np.testing.assert_allclose(out, lam + [-0.5, 0.5])
    r = np.array([0.2, -0.1])
    twice = sadmm.dual_update(sadmm.dual_update(lam, B, r, np.zeros(2), 2.0), B, r, np.zeros(2), 2.0)
    np.testing.assert_allclose(twice, lam - 2 * 2.0 * r)


def test_eta_update_examples():
    assert sadmm.eta_update(2.0, 1.0, 0.1) == pytest.approx(1.9)
    assert sadmm.eta_update(0.0, -0.9 / 0.1, 0.1) == pytest.approx(0.9)
    assert sadmm.eta_update(3.0, 1.0, 0.0) == 3.0


# ------------------------------------------------------------------ local subproblem

def scalar_instance():
    r = np.array([[[1.0], [0.3]], [[0.2], [0.8]]])
    return scalar_model(r, 2.0, 0.5)


def kkt_oracle(agent, dP, zeta):
    """Closed-form solve of the Nt = K = 1, I = 2 agent problem over (W, Q).

    With P = W and q = (Q, c W) the objective is a 2-D convex quadratic and the
    feasible set is {Q >= 0, W >= g (Q + s)}; enumerate the active sets.
    """
    st_, rho, i = agent.state, agent.rho, agent.i
    m = agent.model
    j = 1 - i
    c = m.R[i, j, 0, 0, 0].real
    g = m.gamma[i, 0] / m.R[i, i, 0, 0, 0].real
    s = m.sigma2[i, 0]
    t = agent.B @ st_.qbar
    Pm, qm, lam = st_.P, st_.q, st_.lam

    def f(W, Q):
        q = np.array([Q, c * W])
        return (dP * W + lam @ q + rho / 2 * np.sum((t - q) ** 2)
                + (W - Pm) ** 2 / (2 * zeta) + np.sum((q - qm) ** 2) / (2 * zeta))

    # quadratic form 0.5 x'Hx + h'x in x = (W, Q)
    kq = rho + 1 / zeta
    H = np.diag([1 / zeta + kq * c * c, kq])
    h = np.array([dP + lam[1] * c - rho * t[1] * c - Pm / zeta - qm[1] * c / zeta,
                  lam[0] - rho * t[0] - qm[0] / zeta])
    cands = [np.linalg.solve(H, -h)]
    W0 = -h[0] / H[0, 0]
    cands.append(np.array([max(W0, g * s), 0.0]))
    # SINR tight: W = g (Q + s)
    d = np.array([g, 1.0])
    Qt = -(d @ (H @ np.array([g * s, 0.0])) + d @ h) / (d @ H @ d)
    cands.append(np.array([g * (max(Qt, 0.0) + s), max(Qt, 0.0)]))
    feas = [x for x in cands if x[1] >= -1e-12 and x[0] >= g * (x[1] + s) - 1e-12]
    best = min(feas, key=lambda x: f(*x))
    return best[0], np.array([best[1], c * best[0]])


@pytest.mark.parametrize("i", [0, 1])
def test_local_update_matches_kkt(i, rng):
    model = scalar_instance()
    lay = sadmm.build_layout(2, 1)
    agent = sadmm.Agent(i, model, lay, rho=1.3)
    for trial in range(4):
        agent.state.qbar = rng.uniform(0, 2, lay.n_public)
        agent.state.lam = rng.normal(0, 1, 2)
        agent.state.P = rng.uniform(0, 3)
        agent.state.q = rng.uniform(0, 1, 2)
        dP, zeta = rng.choice([0.0, 0.9, 10.0]), rng.uniform(0.05, 1.0)
        P_ref, q_ref = kkt_oracle(agent, dP, zeta)
        st_ = sadmm.local_primal_update(agent, dP, zeta)
        assert st_.P == pytest.approx(P_ref, rel=1e-6, abs=1e-7)
        np.testing.assert_allclose(st_.q, q_ref, rtol=1e-6, atol=1e-7)


def test_local_update_tiny_zeta_freezes(toy):
    model, _ = toy
    lay = sadmm.build_layout(model.I, model.K)
    agent = sadmm.Agent(0, model, lay, rho=1.0)
    agent.primal_update(10.0, 0.1)
    P0, q0 = agent.state.P, agent.state.q.copy()
    agent.state.qbar = np.full(lay.n_public, 5.0)
    agent.state.lam = np.ones(lay.n_private)
    agent.primal_update(10.0, 1e-9)
    assert agent.state.P == pytest.approx(P0, rel=1e-5)
    np.testing.assert_allclose(agent.state.q, q0, rtol=1e-5, atol=1e-6)


def test_local_update_large_rho_projects(toy):
    import cvxpy as cp
    from greencmbf import conic
    model, _ = toy
    lay = sadmm.build_layout(model.I, model.K)
    agent = sadmm.Agent(1, model, lay, rho=1e6)
    target_pub = np.array([2.0, 1.0])
    agent.state.qbar = target_pub
    agent.primal_update(1.0, 1e3)
    # constrained projection of B q̄ onto the achievable (Q, q) set, solved directly
    prob = conic.ConicProblem("proj")
    W = prob.hermitian_psd("W", model.Nt)
    q = prob.free("q", 2)
    i, j = 1, 0
    prob.add(W.inner(model.R[i, i, 0]) / model.gamma[i, 0] >= q[0] + model.sigma2[i, 0], q[0] >= 0,
             q[1] == W.inner(model.R[i, j, 0]))
    prob.minimize(cp.sum_squares(q - agent.B @ target_pub))
    ref = conic.solve(prob)
    np.testing.assert_allclose(agent.state.q, ref["q"], rtol=1e-3, atol=1e-4)


def test_local_update_invariants(toy):
    model, _ = toy
    lay = sadmm.build_layout(model.I, model.K)
    agent = sadmm.Agent(0, model, lay, rho=1.0)
    st_ = agent.primal_update(10.0, 0.1)
    assert np.all(st_.q >= 0)
    assert st_.P == pytest.approx(np.trace(st_.W[0]).real, rel=1e-9)
    assert np.linalg.eigvalsh(st_.W[0]).min() >= -1e-7


def test_primal_update_rejects_zero_step(toy):
    model, _ = toy
    agent = sadmm.Agent(0, model, sadmm.build_layout(model.I, model.K), 1.0)
    with pytest.raises(CmbfError):
        agent.primal_update(1.0, 0.0)


# ------------------------------------------------------------------ full runs

def short_params(**kw):
    base = dict(theta=0.9, max_iters=25, use_stop_rule=False)
    base.update(kw)
    return sadmm.SadmmParams(**base)


def test_run_smoke(toy, tmp_path):
    model, db = toy
    res = sadmm.run(model, db, short_params(), np.random.default_rng(0))
    tr = res.trace
    assert len(tr) == res.iterations == 25
    assert len(tr.residual) == len(tr.inst_objective) == len(tr.avg_objective) == len(tr.sample_index)
    assert min(tr.residual) >= 0
    assert all(0 <= s < len(db) for s in tr.sample_index)
    assert check_qos(model, res.solution, 1e-6).all()
    tr.to_csv(tmp_path / "trace.csv")
    back = sadmm.IterationTrace.from_csv(tmp_path / "trace.csv")
    assert back.inst_objective == tr.inst_objective and back.residual == tr.residual
    header = (tmp_path / "trace.csv").read_text().splitlines()[0]
    assert header == "iter,sample_index,inst_objective,avg_objective,residual,wall_ms"


def test_run_deterministic_and_parallel_invariant(toy):
    model, db = toy
    a = sadmm.run(model, db, short_params(max_iters=10), np.random.default_rng(5))
    b = sadmm.run(model, db, short_params(max_iters=10, workers=2), np.random.default_rng(5))
    assert a.trace.sample_index == b.trace.sample_index
    assert a.trace.inst_objective == b.trace.inst_objective
    np.testing.assert_array_equal(a.solution.W, b.solution.W)


def test_public_copies_identical(toy):
    model, db = toy
    seen = []

    def check(m, agents, trace):
        ref = agents[0].state.qbar
        seen.append(all(np.array_equal(ag.state.qbar, ref) for ag in agents))

    sadmm.run(model, db, short_params(max_iters=8), np.random.default_rng(1), callback=check)
    assert seen and all(seen)


def test_subgradient_bound_along_run(toy):
    model, db = toy
    theta = 0.9
    bound = cvar.subgradient_bound(db.a_max, theta)
    norms = []

    def check(m, agents, trace):
        s = trace.sample_index[-1]
        for ag in agents:
            dP, deta = cvar.subgradient(ag.state.P, ag.state.eta, db.a[s, ag.i], db.b[s, ag.i],
                                        db.e[s, ag.i], theta)
            norms.append(dP ** 2 + deta ** 2)

    sadmm.run(model, db, short_params(max_iters=10), np.random.default_rng(2), callback=check)
    assert max(norms) <= bound


def test_exchange_symmetry(toy):
    model, db = toy
    perm = [1, 0]
    pdb = SampleDatabase(db.a[:, perm], db.b[:, perm], db.e[:, perm])
    a = sadmm.run(model, db, short_params(max_iters=12), np.random.default_rng(9))
    b = sadmm.run(model.permuted(perm), pdb, short_params(max_iters=12), np.random.default_rng(9))
    assert a.trace.sample_index == b.trace.sample_index
    np.testing.assert_allclose(b.trace.inst_objective, a.trace.inst_objective, rtol=1e-5, atol=1e-6)
    Pa = np.array([ag.state.P for ag in a.agents])
    Pb = np.array([ag.state.P for ag in b.agents])
    np.testing.assert_allclose(Pb, Pa[perm], rtol=1e-5, atol=1e-6)


def test_tiny_stepsize_freezes_primal(toy):
    model, db = toy
    P_hist, eta_hist = [], []

    def rec(m, agents, trace):
        P_hist.append([ag.state.P for ag in agents])
        eta_hist.append([ag.state.eta for ag in agents])

    res = sadmm.run(model, db, short_params(max_iters=6, zeta0=1e-8), np.random.default_rng(0), callback=rec)
    # the first solve must reach the feasible set; afterwards the iterates barely move
    P_hist = np.array(P_hist)
    np.testing.assert_allclose(P_hist[1:], P_hist[1:2].repeat(5, axis=0), rtol=1e-4)
    assert np.max(np.abs(eta_hist)) < 1e-6
    assert check_qos(model, res.solution).all()


def test_stop_rule_and_best_iterate(toy):
    model, db = toy
    res = sadmm.run(model, db, short_params(max_iters=60, use_stop_rule=True, stop_window=5,
                                            residual_tol=1e-12, rel_change_tol=1e-12),
                    np.random.default_rng(0))
    assert not res.converged and res.iterations == 60
    assert check_qos(model, res.solution).all()
    res = sadmm.run(model, db, short_params(max_iters=60, use_stop_rule=True, stop_window=5,
                                            residual_tol=1e9, rel_change_tol=1e9),
                    np.random.default_rng(0))
    assert res.converged and res.iterations == 6


def test_running_average_modes():
    prefix = np.concatenate([[0.0], np.cumsum([10.0, 2.0, 4.0, 6.0])])
    assert sadmm.running_average(prefix, 4, "cumulative") == 5.5
    assert sadmm.running_average(prefix, 4, "suffix") == 5.0
    assert sadmm.running_average(prefix, 1, "suffix") == 10.0


def test_band_entry():
    assert sadmm.band_entry([0, 0, 9.5, 10.5, 20, 10.2, 9.9], 10.0) == 6
    assert sadmm.band_entry([10.0, 10.0], 10.0) == 1
    assert sadmm.band_entry([10.0, 0.0], 10.0) is None


def test_params_validation():
    with pytest.raises(CmbfError):
        sadmm.SadmmParams(zeta_mode="adaptive")
    with pytest.raises(CmbfError):
        sadmm.SadmmParams(averaging="median")
    with pytest.raises(CmbfError):
        sadmm.SadmmParams(rho=0.0)
    p = sadmm.SadmmParams(zeta0=0.4)
    assert p.zeta(4) == pytest.approx(0.2)
    assert sadmm.SadmmParams(zeta_mode="constant").zeta(100) == 0.1


def test_run_rejects_bad_instances(toy):
    model, db = toy
    one_cell = scalar_model([[[1.0]]], 1.0, 1.0)
    with pytest.raises(InstanceError):
        sadmm.run(one_cell, SampleDatabase([[1.0]], [[0.9]], [[0.0]]), short_params())
    with pytest.raises(InstanceError):
        sadmm.run(model, SampleDatabase([[1.0] * 3], [[0.9] * 3], [[0.0] * 3]), short_params())
