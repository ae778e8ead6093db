"""Downlink problem instance, SINR evaluation and the two-way trading cost.

Array conventions used across the package:

* ``R[j, i, k]`` is the ``(Nt, Nt)`` covariance of the channel from BS ``j``
  to user ``k`` of cell ``i``, so ``R`` has shape ``(I, I, K, Nt, Nt)``.
* ``W[i, k]`` is the transmit covariance of user ``(i, k)``; shape
  ``(I, K, Nt, Nt)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InstanceError, PricingError

HERMITIAN_TOL = 1e-10
HERMITIAN_WARN = 1e-8
PSD_TOL = 1e-9
QOS_TOL = 1e-6


def hermitian_part(A):
    return 0.5 * (A + np.conj(np.swapaxes(A, -1, -2)))


@dataclass(frozen=True)
class SystemModel:
    """Immutable multicell instance.

    Covariances are symmetrized on construction; a warning is emitted when the
    input asymmetry exceeds ``1e-8``.
    """

    R: np.ndarray
    gamma: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=complex)
        if R.ndim != 5 or R.shape[0] != R.shape[1] or R.shape[3] != R.shape[4]:
            raise InstanceError(f"R must have shape (I, I, K, Nt, Nt), got {R.shape}")
        I, _, K, Nt, _ = R.shape
        asym = np.max(np.abs(R - np.conj(np.swapaxes(R, -1, -2)))) if R.size else 0.0
        if asym > HERMITIAN_WARN:
            warnings.warn(f"channel covariances asymmetric by {asym:.2e}; symmetrizing",
                          stacklevel=3)
        R = hermitian_part(R)
        min_eig = np.linalg.eigvalsh(R).min()
        if min_eig < -PSD_TOL:
            raise InstanceError(f"channel covariance not PSD (min eigenvalue {min_eig:.3e})")
        gamma = np.broadcast_to(np.asarray(self.gamma, dtype=float), (I, K)).copy()
        sigma2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), (I, K)).copy()
        if np.any(gamma <= 0):
            raise InstanceError("SINR targets must be positive")
        if np.any(sigma2 <= 0):
            raise InstanceError("noise variances must be positive")
        for name, arr in (("R", R), ("gamma", gamma), ("sigma2", sigma2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def I(self):
        return self.R.shape[0]

    @property
    def K(self):
        return self.R.shape[2]

    @property
    def Nt(self):
        return self.R.shape[3]

    def permuted(self, perm):
        """Relabel base stations: new BS ``n`` is old BS ``perm[n]``."""
        perm = np.asarray(perm)
        return SystemModel(self.R[np.ix_(perm, perm)], self.gamma[perm], self.sigma2[perm])

    def with_gamma(self, gamma):
        return SystemModel(self.R, gamma, self.sigma2)

    def is_rank_one(self, tol=1e-8):
        ev = np.linalg.eigvalsh(self.R)
        top = ev[..., -1]
        second = ev[..., -2] if self.Nt > 1 else np.zeros_like(top)
        return bool(np.all(second <= tol * np.maximum(top, 1e-300)))


@dataclass
class BeamformingSolution:
    """Per-BS transmit covariances, optional beamformers, powers and thresholds.

    ``extraction_tol`` records how closely ``w w^H`` reproduces ``W`` when
    ``w`` is present.
    """

    W: np.ndarray
    P: np.ndarray
    eta: np.ndarray
    w: np.ndarray | None = None
    extraction_tol: float = 0.0
    info: dict = field(default_factory=dict)

    @classmethod
    def from_covariances(cls, W, eta=None, **kw):
        W = hermitian_part(np.asarray(W, dtype=complex))
        P = np.einsum("ikaa->i", W).real
        eta = np.zeros(W.shape[0]) if eta is None else np.asarray(eta, dtype=float)
        return cls(W=W, P=P, eta=eta, **kw)

    @classmethod
    def from_beamformers(cls, w, eta=None, **kw):
        w = np.asarray(w, dtype=complex)
        W = np.einsum("ika,ikb->ikab", w, w.conj())
        sol = cls.from_covariances(W, eta=eta, **kw)
        sol.w = w
        return sol

    def check_invariants(self, rtol=1e-6):
        P = np.einsum("ikaa->i", self.W).real
        if not np.allclose(P, self.P, rtol=rtol, atol=1e-12):
            raise InstanceError("P does not match the trace of W")
        if np.linalg.eigvalsh(hermitian_part(self.W)).min() < -PSD_TOL * max(1.0, self.P.max()):
            raise InstanceError("W is not PSD")
        if self.w is not None:
            ww = np.einsum("ika,ikb->ikab", self.w, self.w.conj())
            err = np.max(np.abs(ww - self.W))
            if err > max(self.extraction_tol, 1e-9) * max(1.0, np.abs(self.W).max()):
                raise InstanceError(f"w w^H differs from W by {err:.2e}")


def _check_dims(model, W):
    W = np.asarray(W)
    if W.shape != (model.I, model.K, model.Nt, model.Nt):
        raise InstanceError(
            f"W has shape {W.shape}, expected {(model.I, model.K, model.Nt, model.Nt)}")
    return W


def received_powers(model, W):
    """``T[j, i, k, l] = tr(R[j, i, k] W[j, l])`` (real part)."""
    W = _check_dims(model, W)
    return np.einsum("jikab,jlba->jikl", model.R, W).real


def sinr_all(model, W):
    """SINR of every user as an ``(I, K)`` array."""
    W = getattr(W, "W", W)
    T = received_powers(model, W)
    I, K = model.I, model.K
    idx = np.arange(I)
    own = T[idx, idx]                        # (i, k, l): from own BS
    signal = np.einsum("ikk->ik", own)
    intra = own.sum(axis=2) - signal
    total_in = T.sum(axis=3).sum(axis=0)     # (i, k): all BSs, all streams
    inter = total_in - own.sum(axis=2)
    return signal / (intra + inter + model.sigma2)


def sinr(model, sol, i, k):
    if not (0 <= i < model.I and 0 <= k < model.K):
        raise InstanceError(f"user index ({i}, {k}) out of range")
    return float(sinr_all(model, sol)[i, k])


def check_qos(model, sol, tol=QOS_TOL):
    """Boolean ``(I, K)`` map: user passes iff ``sinr >= gamma * (1 - tol)``."""
    return sinr_all(model, sol) >= model.gamma * (1.0 - tol)


def transaction_cost(P, a, b, e):
    """Net cost of buying shortfall at ``a`` and selling surplus at ``b``.

    Broadcasts over array arguments. Raises :class:`PricingError` when any
    ``a < b``.
    """
    P, a, b, e = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (P, a, b, e)))
    if np.any(a < b):
        raise PricingError("buy price must be at least the sell price (a >= b)")
    cost = a * np.maximum(P - e, 0.0) - b * np.maximum(e - P, 0.0)
    return cost if cost.ndim else float(cost)


def transaction_cost_symmetric(P, a, b, e):
    """Same cost written as ``alpha |P - e| + beta (P - e)``."""
    P, a, b, e = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (P, a, b, e)))
    if np.any(a < b):
        raise PricingError("buy price must be at least the sell price (a >= b)")
    alpha = 0.5 * (a - b)
    beta = 0.5 * (a + b)
    cost = alpha * np.abs(P - e) + beta * (P - e)
    return cost if cost.ndim else float(cost)
