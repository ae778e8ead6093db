"""Centralized oracle: sample-average SDR, rank-one SOCP path and the No-RES baseline."""

from __future__ import annotations

import cvxpy as cp
import numpy as np

from . import conic
from .cvar import _check_theta
from .errors import CmbfError, InstanceError
from .model import BeamformingSolution, transaction_cost

DEFAULT_ORACLE_SAMPLES = 500
RANK_ONE_TOL = 1e-8


def _covariance_blocks(prob, model):
    return {(i, k): prob.hermitian_psd(f"W[{i},{k}]", model.Nt)
            for i in range(model.I) for k in range(model.K)}


def _qos_constraints(model, W):
    """Lifted SINR constraints for every user."""
    I, K = model.I, model.K
    out = []
    for i in range(I):
        for k in range(K):
            Rown = model.R[i, i, k]
            lhs = W[i, k].inner(Rown) / model.gamma[i, k]
            lhs = lhs - sum((W[i, l].inner(Rown) for l in range(K) if l != k), 0.0)
            inter = sum((W[j, l].inner(model.R[j, i, k])
                         for j in range(I) if j != i for l in range(K)), 0.0)
            out.append(lhs >= inter + model.sigma2[i, k])
    return out


def _collect(model, sol, W, eta, rel_tol=conic.EXTRACT_TOL):
    Wv = np.array([[sol[W[i, k].name] for k in range(model.K)] for i in range(model.I)])
    out = BeamformingSolution.from_covariances(Wv, eta=eta)
    w = np.empty((model.I, model.K, model.Nt), dtype=complex)
    ratios = np.empty((model.I, model.K))
    for i in range(model.I):
        for k in range(model.K):
            w[i, k], _, ratios[i, k] = conic.extract_rank_one(Wv[i, k], rel_tol)
    out.info["rank_ratio"] = ratios
    if np.all(ratios <= rel_tol):
        out.w = w
        out.extraction_tol = float(10 * model.Nt * max(ratios.max(), 1e-12))
    return out


def _hinge_objective(prob, P, eta, db, theta, n):
    """Epigraph of ``sum_i [eta_i + mean_s (f_i(P_i, s) - eta_i)^+ / (1 - theta)]``."""
    I = db.I
    a, b, e = db.a[:n], db.b[:n], db.e[:n]
    t = prob.nonneg("t", (n, I))
    Pmat = np.ones((n, 1)) @ cp.reshape(P, (1, I), order="C")
    Emat = np.ones((n, 1)) @ cp.reshape(eta, (1, I), order="C")
    prob.add(t >= cp.multiply(a, Pmat - e) - Emat,
             t >= cp.multiply(b, Pmat - e) - Emat)
    return cp.sum(eta) + cp.sum(t) / ((1.0 - theta) * n)


def solve_saa(model, db, theta, n_samples=DEFAULT_ORACLE_SAMPLES, tol=conic.DEFAULT_TOL,
              dump_dir=None):
    """Sample-average CVaR beamforming over the first ``n_samples`` archive entries.

    Returns ``(solution, objective)``; raises :class:`InfeasibleError` when
    the QoS targets cannot be met.
    """
    _check_theta(theta)
    if db.I != model.I:
        raise InstanceError(f"database has {db.I} BSs, model has {model.I}")
    n = len(db) if n_samples is None else min(n_samples, len(db))
    prob = conic.ConicProblem("saa")
    W = _covariance_blocks(prob, model)
    P = prob.free("P", model.I)
    eta = prob.free("eta", model.I)
    prob.add([P[i] == sum(W[i, k].trace() for k in range(model.K)) for i in range(model.I)])
    prob.add(_qos_constraints(model, W))
    prob.minimize(_hinge_objective(prob, P, eta, db, theta, n))
    sol = conic.require_optimal(conic.solve(prob, tol, dump_dir), "sample-average problem")
    out = _collect(model, sol, W, sol["eta"])
    out.info["n_samples"] = n
    return out, sol.objective


def solve_min_power(model, weights=None, tol=conic.DEFAULT_TOL, dump_dir=None):
    """Weighted sum-power minimization under the QoS constraints."""
    weights = np.ones(model.I) if weights is None else np.asarray(weights, dtype=float)
    prob = conic.ConicProblem("min_power")
    W = _covariance_blocks(prob, model)
    prob.add(_qos_constraints(model, W))
    prob.minimize(sum(weights[i] * W[i, k].trace() for i in range(model.I) for k in range(model.K)))
    sol = conic.require_optimal(conic.solve(prob, tol, dump_dir), "sum-power problem")
    return _collect(model, sol, W, np.zeros(model.I)), sol.objective


def solve_no_res_baseline(model, db, tol=conic.DEFAULT_TOL, dump_dir=None):
    """Equal-weight sum-power beamformers priced with no harvested energy.

    Returns ``(solution, costs)`` with one total cost per archive sample.
    """
    sol, _ = solve_min_power(model, tol=tol, dump_dir=dump_dir)
    costs = transaction_cost(sol.P[None, :], db.a, db.b, 0.0).sum(axis=1)
    return sol, costs


def channel_vectors(model, tol=RANK_ONE_TOL):
    """``h[j, i, k]`` with ``R[j, i, k] = h h^H``; raises if any covariance is not rank-one."""
    ev, U = np.linalg.eigh(model.R)
    top = ev[..., -1]
    second = ev[..., -2] if model.Nt > 1 else np.zeros_like(top)
    if np.any(second > tol * np.maximum(top, 1e-300)):
        raise CmbfError("SOCP path requires rank-one channel covariances")
    return np.sqrt(np.clip(top, 0.0, None))[..., None] * U[..., -1]


def solve_socp_fastpath(model, db, theta, n_samples=DEFAULT_ORACLE_SAMPLES,
                        tol=conic.DEFAULT_TOL, dump_dir=None):
    """Second-order-cone reformulation for rank-one channels.

    Each SINR constraint becomes ``||interference, sigma|| <= Re(h^H w) /
    sqrt(gamma)`` after fixing the common phase of ``h^H w``.
    """
    _check_theta(theta)
    h = channel_vectors(model)
    I, K, Nt = model.I, model.K, model.Nt
    n = len(db) if n_samples is None else min(n_samples, len(db))
    prob = conic.ConicProblem("socp")
    w = {(i, k): prob.complex_vector(f"w[{i},{k}]", Nt) for i in range(I) for k in range(K)}
    P = prob.free("P", I)
    eta = prob.free("eta", I)
    for i in range(I):
        prob.add(sum(w[i, k].norm_squared() for k in range(K)) <= P[i])
    for i in range(I):
        for k in range(K):
            parts = []
            for j in range(I):
                for l in range(K):
                    if (j, l) == (i, k):
                        continue
                    parts.extend(w[j, l].inner(h[j, i, k]))
            parts.append(np.sqrt(model.sigma2[i, k]))
            re, _ = w[i, k].inner(h[i, i, k])
            prob.add(cp.norm(cp.hstack(parts), 2) <= re / np.sqrt(model.gamma[i, k]))
    prob.minimize(_hinge_objective(prob, P, eta, db, theta, n))
    sol = conic.require_optimal(conic.solve(prob, tol, dump_dir), "SOCP problem")
    wv = np.array([[sol[w[i, k].name] for k in range(K)] for i in range(I)])
    out = BeamformingSolution.from_beamformers(wv, eta=sol["eta"])
    out.info["n_samples"] = n
    return out, sol.objective
