"""Distributed stochastic ADMM over per-BS agents.

Each base station ``i`` keeps a private interference vector ``q_i`` of length
``I*K``: the first ``K`` slots hold the total inter-cell interference
``Q_ik`` its own users tolerate, the remaining ``(I-1)*K`` slots hold the
interference ``q_ijk`` it causes at user ``k`` of every other cell ``j``
(ordered by ``j`` then ``k``). The public vector ``qbar`` lists every
``q_ijk`` once, ordered by source ``i``, receiver ``j != i``, user ``k``.
``B_i`` maps ``qbar`` to the slots of ``q_i``: it selects ``qbar_ijk`` for
``q_ijk`` and sums ``qbar_jik`` over ``j != i`` for ``Q_ik``.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np

from . import conic, cvar
from .errors import CmbfError, InstanceError
from .model import BeamformingSolution

log = logging.getLogger(__name__)

ZETA_MODES = ("diminishing", "constant")
AVERAGING_MODES = ("cumulative", "suffix")
MAX_CURVATURE = 1e4


@dataclass(frozen=True)
class ConsensusLayout:
    I: int
    K: int
    B: tuple

    @property
    def n_private(self):
        return self.I * self.K

    @property
    def n_public(self):
        return self.I * (self.I - 1) * self.K

    def public_index(self, i, j, k):
        """Slot of ``qbar_ijk`` (interference from BS ``i`` at user ``(j, k)``)."""
        if i == j:
            raise IndexError("public slots exist only for i != j")
        jpos = j if j < i else j - 1
        return (i * (self.I - 1) + jpos) * self.K + k

    def private_index(self, i, j, k):
        """Slot of ``q_ijk`` inside ``q_i``; ``j == i`` addresses ``Q_ik``."""
        if j == i:
            return k
        jpos = j if j < i else j - 1
        return self.K + jpos * self.K + k

    def receiver_groups(self):
        """Public slots grouped by receiving user ``(j, k)``; each group has size ``I - 1``."""
        return np.array([[self.public_index(i, j, k) for i in range(self.I) if i != j]
                         for j in range(self.I) for k in range(self.K)])


def build_layout(I, K):
    if I < 2:
        raise InstanceError("consensus needs at least two base stations; use the centralized solver")
    if K < 1:
        raise InstanceError("need at least one user per cell")
    layout = ConsensusLayout(I, K, ())
    B = []
    for i in range(I):
        Bi = np.zeros((layout.n_private, layout.n_public))
        for k in range(K):
            for j in range(I):
                if j != i:
                    Bi[layout.private_index(i, i, k), layout.public_index(j, i, k)] = 1.0
                    Bi[layout.private_index(i, j, k), layout.public_index(i, j, k)] = 1.0
        Bi.setflags(write=False)
        B.append(Bi)
    return ConsensusLayout(I, K, tuple(B))


def public_update(q, lam, layout, rho):
    """Closed-form minimizer of ``sum_i -lam_i' B_i qbar + rho/2 ||B_i qbar - q_i||^2``.

    The normal matrix ``sum_i B_i' B_i`` is block diagonal over receiver
    groups with blocks ``I + 11'``, whose inverse is ``I - 11'/I``.
    """
    if rho <= 0:
        raise CmbfError("penalty rho must be positive")
    rhs = np.zeros(layout.n_public)
    for Bi, qi, li in zip(layout.B, q, lam):
        rhs += Bi.T @ (np.asarray(qi) + np.asarray(li) / rho)
    groups = layout.receiver_groups()
    out = np.empty_like(rhs)
    block = rhs[groups]
    out[groups] = block - block.sum(axis=1, keepdims=True) / layout.I
    return out


def dual_update(lam, Bi, qbar, qi, rho):
    return lam - rho * (Bi @ qbar - qi)


def eta_update(eta, deta, zeta):
    """Proximal step on the threshold: ``eta - zeta * d f / d eta``."""
    return eta - zeta * deta


@dataclass
class AgentState:
    P: float = 0.0
    eta: float = 0.0
    q: np.ndarray = None
    lam: np.ndarray = None
    qbar: np.ndarray = None
    W: np.ndarray = None
    m: int = 0


class Agent:
    """One base station: owns its local covariances and a cached subproblem."""

    def __init__(self, i, model, layout, rho, tol=conic.DEFAULT_TOL):
        self.i = i
        self.model = model
        self.layout = layout
        self.rho = rho
        self.tol = tol
        self.B = layout.B[i]
        I, K, Nt = model.I, model.K, model.Nt
        self.state = AgentState(q=np.zeros(I * K), lam=np.zeros(I * K),
                                qbar=np.zeros(layout.n_public),
                                W=np.zeros((K, Nt, Nt), dtype=complex))
        self._build()

    def _build(self):
        model, lay, i = self.model, self.layout, self.i
        I, K = model.I, model.K
        prob = conic.ConicProblem(f"agent{i}")
        W = [prob.hermitian_psd(f"W[{k}]", model.Nt) for k in range(K)]
        P = prob.free("P")
        q = prob.free("q", I * K)
        prob.add(P == sum(w.trace() for w in W))
        for k in range(K):
            Rown = model.R[i, i, k]
            lhs = W[k].inner(Rown) / model.gamma[i, k]
            lhs = lhs - sum((W[l].inner(Rown) for l in range(K) if l != k), 0.0)
            prob.add(lhs >= q[lay.private_index(i, i, k)] + model.sigma2[i, k],
                     q[lay.private_index(i, i, k)] >= 0)
        for j in range(I):
            if j == i:
                continue
            for k in range(K):
                prob.add(q[lay.private_index(i, j, k)] == sum(W[l].inner(model.R[i, j, k]) for l in range(K)))
        # proximal terms are centred on the incumbent, which keeps the
        # solver accurate when 1/zeta dominates
        Pm = prob.parameter("Pm")
        qm = prob.parameter("qm", I * K)
        dPv = prob.free("dP")
        dq = prob.free("dq", I * K)
        prob.add(P == Pm + dPv, q == qm + dq)
        quadP = prob.parameter("quadP", nonneg=True)
        quadq = prob.parameter("quadq", nonneg=True)
        linP = prob.parameter("linP")
        linq = prob.parameter("linq", I * K)
        prob.minimize(quadP * cp.square(dPv) + linP * dPv + quadq * cp.sum_squares(dq) + linq @ dq)
        self.problem, self.W, self.P, self.q = prob, W, P, q

    def primal_update(self, dP, zeta):
        """Solve the local linearized/proximal subproblem over the feasible set of this BS."""
        if zeta <= 0:
            raise CmbfError("stepsize zeta must be positive for the primal update")
        st, rho = self.state, self.rho
        target = self.B @ st.qbar
        quadP = 1.0 / (2 * zeta)
        quadq = rho / 2 + 1.0 / (2 * zeta)
        linq = st.lam - rho * (target - st.q)
        # cap the curvature: large enough that the solver's absolute gap does
        # not blur the step, small enough to stay well conditioned
        scale = min(1.0, MAX_CURVATURE / quadq)
        self.problem.set(Pm=st.P, qm=st.q, quadP=quadP * scale, quadq=quadq * scale,
                         linP=dP * scale, linq=linq * scale)
        sol = conic.require_optimal(conic.solve(self.problem, self.tol),
                                    f"local subproblem of BS {self.i}")
        W = np.array([sol[w.name] for w in self.W])
        st.W = W
        st.P = float(np.einsum("kaa->", W).real)
        st.q = np.maximum(np.asarray(sol["q"], dtype=float), 0.0)
        return st

    def local_objective(self, dP, zeta, P, q):
        """Value of the local subproblem objective (up to a constant), for checks."""
        st, rho = self.state, self.rho
        return (P * dP + st.lam @ q + rho / 2 * np.sum((self.B @ st.qbar - q) ** 2)
                + (P - st.P) ** 2 / (2 * zeta) + np.sum((q - st.q) ** 2) / (2 * zeta))


def local_primal_update(agent, dP, zeta):
    return agent.primal_update(dP, zeta)


def local_eta_update(agent, deta, zeta):
    agent.state.eta = eta_update(agent.state.eta, deta, zeta)
    return agent.state.eta


@dataclass
class SadmmParams:
    """Algorithm settings.

    ``zeta_mode`` is ``"diminishing"`` (``zeta0 / sqrt(m)``) or
    ``"constant"``. ``averaging`` selects the reported running average:
    ``"cumulative"`` averages every iteration so far, ``"suffix"`` averages
    the most recent half (iterations ``floor(m/2)+1..m``), which discards the
    start-up transient from the all-zero initialization.
    """

    theta: float = 0.9
    rho: float = 1.0
    zeta0: float = 0.1
    zeta_mode: str = "diminishing"
    max_iters: int = 500
    residual_tol: float = 1e-3
    rel_change_tol: float = 1e-4
    stop_window: int = 50
    use_stop_rule: bool = True
    averaging: str = "cumulative"
    trials: int = conic.DEFAULT_TRIALS
    tol: float = conic.DEFAULT_TOL
    workers: int = 1

    def __post_init__(self):
        if self.averaging not in AVERAGING_MODES:
            raise CmbfError(f"unknown averaging mode {self.averaging!r}")
        if self.zeta_mode not in ZETA_MODES:
            raise CmbfError(f"unknown stepsize mode {self.zeta_mode!r}")
        if self.rho <= 0 or self.zeta0 <= 0:
            raise CmbfError("rho and zeta0 must be positive")
        if self.max_iters < 1:
            raise CmbfError("max_iters must be at least 1")

    def zeta(self, m):
        """Stepsize for round ``m`` (1-based)."""
        if self.zeta_mode == "constant":
            return self.zeta0
        if self.zeta_mode == "diminishing":
            return self.zeta0 / np.sqrt(m)
        raise CmbfError(f"unknown stepsize mode {self.zeta_mode!r}")


@dataclass
class IterationTrace:
    iters: list = field(default_factory=list)
    sample_index: list = field(default_factory=list)
    inst_per_bs: list = field(default_factory=list)
    inst_objective: list = field(default_factory=list)
    avg_objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def __len__(self):
        return len(self.iters)

    def append(self, it, s, per_bs, avg, residual, wall_ms):
        self.iters.append(it)
        self.sample_index.append(int(s))
        self.inst_per_bs.append(np.asarray(per_bs, dtype=float))
        self.inst_objective.append(float(np.sum(per_bs)))
        self.avg_objective.append(float(avg))
        self.residual.append(float(residual))
        self.wall_ms.append(float(wall_ms))

    def to_csv(self, path, precise=True):
        fmt = repr if precise else (lambda x: f"{x:.6g}")
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "sample_index", "inst_objective", "avg_objective", "residual", "wall_ms"])
            for row in zip(self.iters, self.sample_index, self.inst_objective,
                           self.avg_objective, self.residual, self.wall_ms):
                w.writerow([row[0], row[1], *(fmt(float(x)) for x in row[2:])])

    @classmethod
    def from_csv(cls, path):
        tr = cls()
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                tr.iters.append(int(row["iter"]))
                tr.sample_index.append(int(row["sample_index"]))
                tr.inst_objective.append(float(row["inst_objective"]))
                tr.avg_objective.append(float(row["avg_objective"]))
                tr.residual.append(float(row["residual"]))
                tr.wall_ms.append(float(row["wall_ms"]))
        return tr


@dataclass
class RunResult:
    solution: BeamformingSolution
    trace: IterationTrace
    converged: bool
    iterations: int
    agents: list = field(repr=False, default_factory=list)


def consensus_residual(layout, qbar, q):
    return float(sum(np.linalg.norm(Bi @ qbar - qi) for Bi, qi in zip(layout.B, q)))


def running_average(prefix, m, mode="cumulative"):
    """Average of iterations ``start..m`` from prefix sums (``prefix[0] == 0``)."""
    start = 0 if mode == "cumulative" else m // 2
    return (prefix[m] - prefix[start]) / (m - start)


def band_entry(avg, target, band=0.10):
    """First (1-based) iteration after which ``avg`` stays within ``target*(1 +/- band)``."""
    avg = np.asarray(avg)
    inside = np.abs(avg - target) <= band * abs(target)
    if not inside.size or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    return 1 if outside.size == 0 else int(outside[-1]) + 2


def run(model, db, params=None, rng=None, callback=None):
    """Run the synchronous distributed algorithm.

    Every round draws one archive sample shared by all BSs, lets each agent
    update ``(P_i, q_i, W_i)`` and ``eta_i``, exchanges ``(q_i, lambda_i)``,
    recomputes the public vector at every agent and updates the duals.
    """
    params = SadmmParams() if params is None else params
    rng = np.random.default_rng() if rng is None else rng
    cvar._check_theta(params.theta)
    if db.I != model.I:
        raise InstanceError(f"database has {db.I} BSs, model has {model.I}")
    if len(db) < 1:
        raise InstanceError("empty database")
    layout = build_layout(model.I, model.K)
    agents = [Agent(i, model, layout, params.rho, params.tol) for i in range(model.I)]
    trace = IterationTrace()
    theta = params.theta
    best = None
    converged = False
    pool = ThreadPoolExecutor(params.workers) if params.workers > 1 else None
    prefix = [0.0]
    try:
        for m in range(1, params.max_iters + 1):
            t0 = time.perf_counter()
            s = int(rng.integers(len(db)))
            a, b, e = db.a[s], db.b[s], db.e[s]
            zeta = params.zeta(m)
            P_old = np.array([ag.state.P for ag in agents])
            eta_old = np.array([ag.state.eta for ag in agents])
            dP, deta = cvar.subgradient(P_old, eta_old, a, b, e, theta)

            def step(i):
                agents[i].primal_update(dP[i], zeta)
                local_eta_update(agents[i], deta[i], zeta)

            if pool is None:
                for i in range(model.I):
                    step(i)
            else:
                list(pool.map(step, range(model.I)))

            messages = [(ag.state.q.copy(), ag.state.lam.copy()) for ag in agents]
            q_all = [msg[0] for msg in messages]
            lam_all = [msg[1] for msg in messages]
            for ag in agents:
                ag.state.qbar = public_update(q_all, lam_all, layout, params.rho)
            for ag in agents:
                st = ag.state
                st.lam = dual_update(st.lam, ag.B, st.qbar, st.q, params.rho)
                st.m = m
            residual = consensus_residual(layout, agents[0].state.qbar, q_all)
            P_new = np.array([ag.state.P for ag in agents])
            eta_new = np.array([ag.state.eta for ag in agents])
            inst = cvar.F_value(P_new, eta_new, a, b, e, theta)

            prefix.append(prefix[-1] + float(inst.sum()))
            avg = running_average(prefix, m, params.averaging)
            trace.append(m, s, inst, avg, residual, 1e3 * (time.perf_counter() - t0))
            if callback is not None:
                callback(m, agents, trace)

            if best is None or residual <= best[0]:
                best = (residual, [ag.state.W.copy() for ag in agents],
                        np.array([ag.state.eta for ag in agents]))

            if params.use_stop_rule and m > params.stop_window:
                prev = trace.avg_objective[-params.stop_window - 1]
                change = abs(avg - prev) / max(abs(prev), 1e-12)
                if residual <= params.residual_tol and change <= params.rel_change_tol:
                    converged = True
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    if converged or not params.use_stop_rule:
        W = np.array([ag.state.W for ag in agents])
        eta = np.array([ag.state.eta for ag in agents])
    else:
        W, eta = np.array(best[1]), best[2]
    sol = conic.randomize_and_scale(model, W, trials=params.trials, rng=rng, eta=eta)
    sol.info["iterate_W"] = W
    return RunResult(sol, trace, converged, len(trace), agents)
