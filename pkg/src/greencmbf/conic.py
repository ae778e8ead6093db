"""Conic program builder/solver, rank-one extraction and randomized rounding.

Complex Hermitian PSD blocks are carried as real symmetric ``2n x 2n`` PSD
variables ``X``. Every trace form ``Re tr(R W)`` is written as
``tr(R_r X) / 2`` with ``R_r = [[Re R, -Im R], [Im R, Re R]]``; since all
data matrices share that structure, an unstructured ``X`` can be projected
back to ``W = (X11 + X22)/2 + 1j (X21 - X12)/2`` without changing any trace
and without losing positive semidefiniteness.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .errors import CmbfError, InfeasibleError, NumericalError
from .model import BeamformingSolution, check_qos, hermitian_part

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
EXTRACT_TOL = 1e-6
DEFAULT_TRIALS = 100


def realify(R):
    """Real symmetric embedding ``[[Re R, -Im R], [Im R, Re R]]``."""
    R = np.asarray(R)
    C, D = R.real, R.imag
    return np.block([[C, -D], [D, C]])


def complexify(X):
    """Project a real ``2n x 2n`` block back to an ``n x n`` Hermitian matrix."""
    n = X.shape[0] // 2
    A = 0.5 * (X[:n, :n] + X[n:, n:])
    B = 0.5 * (X[n:, :n] - X[:n, n:])
    return hermitian_part(A + 1j * B)


class HermitianBlock:
    """Complex Hermitian PSD matrix variable of side ``n``."""

    kind = "psd"

    def __init__(self, name, n):
        self.name = name
        self.n = n
        self.X = cp.Variable((2 * n, 2 * n), PSD=True, name=name)

    def trace(self):
        return 0.5 * cp.trace(self.X)

    def inner(self, R):
        """Affine expression for ``Re tr(R W)``."""
        Rr = realify(hermitian_part(np.asarray(R, dtype=complex)))
        return 0.5 * cp.sum(cp.multiply(Rr, self.X))

    @property
    def value(self):
        return None if self.X.value is None else complexify(self.X.value)

    @property
    def variable(self):
        return self.X


class ComplexVectorBlock:
    """Free complex vector, stored as the stacked real vector ``[Re w; Im w]``."""

    kind = "complex"

    def __init__(self, name, n):
        self.name = name
        self.n = n
        self.x = cp.Variable(2 * n, name=name)

    def inner(self, h):
        """``(Re(h^H w), Im(h^H w))`` as affine expressions."""
        h = np.asarray(h, dtype=complex)
        u, v = h.real, h.imag
        return (np.concatenate([u, v]) @ self.x, np.concatenate([-v, u]) @ self.x)

    def norm_squared(self):
        return cp.sum_squares(self.x)

    @property
    def value(self):
        if self.x.value is None:
            return None
        return self.x.value[: self.n] + 1j * self.x.value[self.n:]

    @property
    def variable(self):
        return self.x


class ScalarBlock:
    def __init__(self, name, shape, kind):
        self.name = name
        self.kind = kind
        self.var = cp.Variable(shape, name=name, nonneg=(kind == "nonneg"))

    @property
    def value(self):
        return self.var.value

    @property
    def variable(self):
        return self.var


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class ConicSolution:
    status: Status
    objective: float
    values: dict = field(default_factory=dict)
    residual: float = np.inf
    diagnostic: str = ""
    solve_time: float = 0.0

    @property
    def optimal(self):
        return self.status is Status.OPTIMAL

    def __getitem__(self, name):
        return self.values[name]


class ConicProblem:
    """Builder for a convex conic program over named blocks.

    Typical use::

        prob = ConicProblem("toy")
        W = prob.hermitian_psd("W", 2)
        prob.add(W.trace() >= 1)
        prob.minimize(W.trace())
        sol = solve(prob)

    Once :meth:`minimize` is called, constraints are frozen; the same problem
    may be re-solved after changing parameter values.
    """

    def __init__(self, name="conic"):
        self.name = name
        self.blocks = {}
        self.parameters = {}
        self.constraints = []
        self._objective = None
        self._cvx = None

    def _register(self, block):
        if block.name in self.blocks:
            raise CmbfError(f"duplicate block name {block.name!r}")
        if self._cvx is not None:
            raise CmbfError("problem is frozen")
        self.blocks[block.name] = block
        return block

    def hermitian_psd(self, name, n):
        return self._register(HermitianBlock(name, n))

    def complex_vector(self, name, n):
        return self._register(ComplexVectorBlock(name, n))

    def nonneg(self, name, shape=()):
        return self._register(ScalarBlock(name, shape, "nonneg")).var

    def free(self, name, shape=()):
        return self._register(ScalarBlock(name, shape, "free")).var

    def parameter(self, name, shape=(), nonneg=False):
        p = cp.Parameter(shape, name=name, nonneg=nonneg)
        self.parameters[name] = p
        return p

    def add(self, *constraints):
        if self._cvx is not None:
            raise CmbfError("problem is frozen")
        for c in constraints:
            if isinstance(c, (list, tuple)):
                self.constraints.extend(c)
            else:
                self.constraints.append(c)

    def minimize(self, expr):
        self._objective = expr
        self._cvx = cp.Problem(cp.Minimize(expr), self.constraints)
        if not self._cvx.is_dcp():
            raise CmbfError("assembled problem is not convex")
        return self

    @property
    def cvx(self):
        if self._cvx is None:
            raise CmbfError("objective not set; call minimize() first")
        return self._cvx

    def set(self, **values):
        for name, value in values.items():
            self.parameters[name].value = value


def _residual(problem):
    worst = 0.0
    for c in problem.cvx.constraints:
        v = c.violation()
        if v is not None and np.size(v):
            worst = max(worst, float(np.max(v)))
    for block in problem.blocks.values():
        if isinstance(block, HermitianBlock) and block.X.value is not None:
            worst = max(worst, float(-min(0.0, np.linalg.eigvalsh(block.X.value).min())))
        elif isinstance(block, ScalarBlock) and block.kind == "nonneg" and block.var.value is not None:
            worst = max(worst, float(-min(0.0, np.min(block.var.value))))
    return worst


def _run(problem, solver, tol):
    opts = {}
    if solver == cp.CLARABEL:
        opts = dict(tol_feas=tol, tol_gap_abs=tol, tol_gap_rel=tol)
    elif solver == cp.CVXOPT:
        opts = dict(abstol=tol, reltol=tol, feastol=tol)
    try:
        problem.cvx.solve(solver=solver, **opts)
    except cp.error.SolverError as exc:
        return "solver_error", str(exc)
    return problem.cvx.status, ""


def solve(problem, tol=DEFAULT_TOL, dump_dir=None):
    """Solve ``problem`` with the interior-point backend.

    Falls back to a second interior-point solver when the first reports an
    inaccurate result. Returns a :class:`ConicSolution`; it never returns an
    ``optimal`` status whose recomputed residuals exceed ``10 * tol`` scaled
    by the magnitude of the solution.
    """
    if dump_dir is not None:
        dump_problem(problem, Path(dump_dir))
    attempts = [cp.CLARABEL]
    if cp.CVXOPT in cp.installed_solvers():
        attempts.append(cp.CVXOPT)
    notes = []
    status = "unsolved"
    for solver in attempts:
        status, msg = _run(problem, solver, tol)
        notes.append(f"{solver}: {status} {msg}".strip())
        if status in (cp.OPTIMAL, cp.INFEASIBLE):
            break
    info = problem.cvx.solver_stats
    elapsed = float(info.solve_time or 0.0) if info is not None else 0.0
    diagnostic = "; ".join(notes)
    if status == cp.INFEASIBLE:
        return ConicSolution(Status.INFEASIBLE, np.inf, diagnostic=diagnostic, solve_time=elapsed)
    if status != cp.OPTIMAL:
        return ConicSolution(Status.NUMERICAL_FAILURE, np.nan, diagnostic=diagnostic,
                             solve_time=elapsed)
    values = {name: block.value for name, block in problem.blocks.items()}
    residual = _residual(problem)
    scale = max(1.0, max((np.max(np.abs(v)) for v in values.values() if v is not None), default=1.0))
    sol = ConicSolution(Status.OPTIMAL, float(problem.cvx.value), values, residual,
                        diagnostic, elapsed)
    if residual > 10 * tol * scale:
        sol.status = Status.NUMERICAL_FAILURE
        sol.diagnostic += f"; residual {residual:.2e} above tolerance"
    return sol


def require_optimal(sol, what):
    if sol.status is Status.INFEASIBLE:
        raise InfeasibleError(f"{what} is infeasible", sol.diagnostic)
    if sol.status is not Status.OPTIMAL:
        raise NumericalError(f"{what} failed numerically", sol.diagnostic)
    return sol


_dump_counter = 0


def dump_problem(problem, directory):
    """Write the assembled program in a plain-text conic form.

    Format (one section per keyword line)::

        # greencmbf conic dump v1
        # minimize 0.5 x'Px + c'x + d  s.t.  b - A x in K
        name <name>
        size <n vars> <m rows>
        cones zero=<z> nonneg=<l> soc=<q1,q2,...> psd=<s1,s2,...>
        offset <d>
        c <n values>
        b <m values>
        A <nnz>        followed by nnz lines "row col value"
        P <nnz>        followed by nnz lines "row col value" (upper triangle)

    PSD cones use the scaled lower-triangular vectorization of the solver.
    """
    global _dump_counter
    directory.mkdir(parents=True, exist_ok=True)
    data, _, _ = problem.cvx.get_problem_data(cp.CLARABEL)
    dims = data["dims"]
    A = sp.coo_matrix(data["A"])
    P = sp.triu(sp.coo_matrix(data["P"])) if data.get("P") is not None else sp.coo_matrix((A.shape[1],) * 2)
    P = sp.coo_matrix(P)
    _dump_counter += 1
    path = directory / f"{problem.name}_{_dump_counter:05d}.conic.txt"
    fmt = lambda xs: " ".join(repr(float(x)) for x in xs)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# greencmbf conic dump v1\n")
        fh.write("# minimize 0.5 x'Px + c'x + d  s.t.  b - A x in K\n")
        fh.write(f"name {problem.name}\n")
        fh.write(f"size {A.shape[1]} {A.shape[0]}\n")
        fh.write(f"cones zero={dims.zero} nonneg={dims.nonneg} "
                 f"soc={','.join(map(str, dims.soc))} psd={','.join(map(str, dims.psd))}\n")
        fh.write(f"offset {float(data.get('offset', 0.0))!r}\n")
        fh.write(f"c {fmt(data['c'])}\n")
        fh.write(f"b {fmt(data['b'])}\n")
        fh.write(f"A {A.nnz}\n")
        for r, c_, v in zip(A.row, A.col, A.data):
            fh.write(f"{r} {c_} {float(v)!r}\n")
        fh.write(f"P {P.nnz}\n")
        for r, c_, v in zip(P.row, P.col, P.data):
            fh.write(f"{r} {c_} {float(v)!r}\n")
    return path


def extract_rank_one(W, rel_tol=EXTRACT_TOL):
    """Principal-eigenvector beamformer of a PSD matrix.

    Returns ``(w, ok, ratio)`` where ``ratio = lambda_2 / lambda_1`` and
    ``ok`` is ``ratio <= rel_tol``. The phase of ``w`` is fixed so that its
    largest-magnitude entry is real and nonnegative.
    """
    W = hermitian_part(np.asarray(W, dtype=complex))
    n = W.shape[0]
    ev, U = np.linalg.eigh(W)
    top = ev[-1]
    if top <= 0 or np.isclose(top, 0.0, atol=1e-300):
        return np.zeros(n, dtype=complex), True, 0.0
    second = max(ev[-2], 0.0) if n > 1 else 0.0
    ratio = float(second / top)
    w = np.sqrt(top) * U[:, -1]
    m = np.argmax(np.abs(w))
    w = w * np.conj(w[m]) / abs(w[m])
    w[m] = abs(w[m])
    return w, ratio <= rel_tol, ratio


def stream_gains(model, w):
    """``g[j, l, i, k] = w_jl^H R_jik w_jl``: power at user (i, k) from stream (j, l)."""
    return np.einsum("jla,jikab,jlb->jlik", w.conj(), model.R, w).real


def min_power_scaling(model, w):
    """Smallest per-stream power factors ``p`` making ``sqrt(p) * w`` meet every SINR target.

    Solves the power-control equations with all constraints tight. Returns
    ``None`` when no nonnegative scaling exists (the interference coupling
    matrix has spectral radius at least one).
    """
    I, K = model.I, model.K
    g = stream_gains(model, w).reshape(I * K, I * K)   # rows: stream, cols: user
    G = g.T                                             # G[user, stream]
    signal = np.diag(G).copy()
    if np.any(signal <= 0):
        return None
    gamma = model.gamma.ravel()
    interference = G - np.diag(signal)
    # normalized coupling F = diag(gamma / signal) * interference
    F = (gamma / signal)[:, None] * interference
    if np.max(np.abs(np.linalg.eigvals(F))) >= 1.0 - 1e-12:
        return None
    A = np.diag(signal / gamma) - interference
    p = np.linalg.solve(A, model.sigma2.ravel())
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        return None
    return p.reshape(I, K)


def scale_to_qos(model, w, margin=1e-9):
    """Rescale beamformer directions to the minimal-power QoS-feasible point."""
    p = min_power_scaling(model, w)
    if p is None:
        return None
    return w * np.sqrt(p * (1.0 + margin))[..., None]


def randomize_and_scale(model, W, trials=DEFAULT_TRIALS, rng=None, eta=None,
                        rel_tol=EXTRACT_TOL):
    """Recover QoS-feasible beamformers from (possibly high-rank) covariances.

    If every block is numerically rank-one and the extracted beamformers are
    feasible, they are returned unchanged. Otherwise candidates
    ``w = U diag(sqrt(lambda)) v`` with unit-modulus random-phase ``v`` (so
    that ``E[w w^H] = W``) are rescaled to the minimal feasible powers, and
    the candidate with the smallest total power is kept.
    """
    if trials < 1:
        raise CmbfError("randomization needs at least one trial")
    rng = np.random.default_rng() if rng is None else rng
    W = hermitian_part(np.asarray(W, dtype=complex))
    I, K, Nt = model.I, model.K, model.Nt
    base = float(np.einsum("ikaa->", W).real)

    extracted = np.empty((I, K, Nt), dtype=complex)
    all_ok = True
    for i in range(I):
        for k in range(K):
            extracted[i, k], ok, _ = extract_rank_one(W[i, k], rel_tol)
            all_ok &= ok
    if all_ok:
        sol = BeamformingSolution.from_beamformers(extracted, eta=eta, extraction_tol=rel_tol)
        if check_qos(model, sol).all():
            sol.info["scaling"] = 1.0
            return sol

    ev, U = np.linalg.eigh(W)
    factors = U * np.sqrt(np.clip(ev, 0.0, None))[..., None, :]
    best, best_power = None, np.inf
    candidates = [extracted] + [
        np.einsum("ikab,ikb->ika", factors, np.exp(2j * np.pi * rng.random((I, K, Nt))))
        for _ in range(trials)
    ]
    for cand in candidates:
        scaled = scale_to_qos(model, cand)
        if scaled is None or not check_qos(model, BeamformingSolution.from_beamformers(scaled)).all():
            continue
        power = float(np.sum(np.abs(scaled) ** 2))
        if power < best_power:
            best, best_power = scaled, power
    if best is None:
        raise InfeasibleError(f"no QoS-feasible candidate after {trials} randomization trials")
    sol = BeamformingSolution.from_beamformers(best, eta=eta)
    sol.info["scaling"] = best_power / base if base > 0 else np.inf
    return sol
