"""Empirical VaR/CVaR, the variational objective and its stochastic subgradient."""

from __future__ import annotations

import math

import numpy as np

from .errors import CmbfError
from .model import transaction_cost


def _check_theta(theta):
    if not 0.0 <= theta < 1.0:
        raise CmbfError(f"confidence level must lie in [0, 1), got {theta}")


def _costs(costs):
    c = np.asarray(costs, dtype=float).ravel()
    if c.size == 0:
        raise CmbfError("empty cost sample")
    return c


def empirical_var(costs, theta):
    """Smallest sample value ``v`` with ``mean(costs <= v) >= theta``."""
    if not 0.0 <= theta <= 1.0:
        raise CmbfError(f"confidence level must lie in [0, 1], got {theta}")
    c = np.sort(_costs(costs))
    n = c.size
    # fraction at c[j] is (#samples <= c[j]) / n; ties are handled by searchsorted
    counts = np.searchsorted(c, c, side="right")
    ok = counts >= theta * n - 1e-12 * n
    return float(c[np.argmax(ok)])


def empirical_cvar(costs, theta):
    """``min_eta eta + sum((c - eta)^+) / ((1 - theta) n)`` minimized exactly.

    The objective is piecewise linear and convex in ``eta`` with breakpoints
    at the samples, so evaluating it at every sample value is exact.
    """
    _check_theta(theta)
    c = np.sort(_costs(costs))
    n = c.size
    suffix = np.concatenate([np.cumsum(c[::-1])[::-1], [0.0]])
    # for eta = c[j]: sum over samples > c[j] of (c - eta); with ties, samples
    # equal to eta contribute zero so the suffix from the last tie onward works.
    upper = np.searchsorted(c, c, side="right")
    tail_sum = suffix[upper] - (n - upper) * c
    values = c + tail_sum / ((1.0 - theta) * n)
    return float(values.min())


def sorted_tail_cvar(costs, theta):
    """Tail-average CVaR: mean of the worst ``(1 - theta)`` mass, with the
    boundary sample weighted fractionally."""
    _check_theta(theta)
    c = np.sort(_costs(costs))[::-1]
    n = c.size
    mass = (1.0 - theta) * n
    full = int(math.floor(mass + 1e-12))
    total = c[:full].sum()
    frac = mass - full
    if full < n and frac > 1e-12:
        total += frac * c[full]
    return float(total / mass)


def F_value(P, eta, a, b, e, theta):
    """Single-sample integrand ``eta + (f(P, s) - eta)^+ / (1 - theta)``."""
    _check_theta(theta)
    cost = transaction_cost(P, a, b, e)
    out = np.asarray(eta, dtype=float) + np.maximum(cost - np.asarray(eta), 0.0) / (1.0 - theta)
    return out if np.ndim(out) else float(out)


def sample_average_F(P, eta, db, theta):
    """Empirical ``sum_i F_i(P_i, eta_i)`` averaged over the archive ``db``."""
    vals = F_value(np.asarray(P)[None, :], np.asarray(eta)[None, :], db.a, db.b, db.e, theta)
    return float(vals.sum(axis=1).mean())


def subgradient(P, eta, a, b, e, theta):
    """Partial derivatives of the single-sample integrand w.r.t. ``P`` and ``eta``.

    At the kinks the ``>=`` branches are taken. Broadcasts over arrays.
    """
    _check_theta(theta)
    P, eta, a, b, e = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (P, eta, a, b, e)))
    in_tail = transaction_cost(P, a, b, e) >= eta
    price = np.where(P >= e, a, b)
    dP = np.where(in_tail, price / (1.0 - theta), 0.0)
    deta = np.where(in_tail, -theta / (1.0 - theta), 1.0)
    if dP.ndim == 0:
        return float(dP), float(deta)
    return dP, deta


def subgradient_bound(a_max, theta):
    """Bound on ``dP**2 + deta**2`` for every sample with prices at most ``a_max``."""
    _check_theta(theta)
    return (a_max ** 2 + max(theta, 1.0 - theta) ** 2) / (1.0 - theta) ** 2
