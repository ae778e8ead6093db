"""
Distributed stochastic ADMM against the oracle
==============================================

Each base station solves its own small conic subproblem per round and
exchanges only interference levels with its neighbours. The running
average of the objective should settle near the centralized optimum.
"""

import numpy as np

from greencmbf import central, sadmm, scenario
from greencmbf.model import check_qos

cfg = scenario.ScenarioConfig(I=3, K=2, Nt=4, n_samples=200, seed=11, res_mean=1.5)
rng = np.random.default_rng(cfg.seed)
model = scenario.make_channels(cfg, rng)
db = scenario.sample_states(cfg, rng)

_, opt = central.solve_saa(model, db, 0.9)
print(f"oracle objective {opt:.4f}")

params = sadmm.SadmmParams(theta=0.9, rho=1.0, zeta0=0.1, zeta_mode="constant",
                           max_iters=400, use_stop_rule=False, averaging="suffix")


def progress(m, agents, trace):
    if m % 50 == 0:
        print(f"  iter {m:4d}  avg {trace.avg_objective[-1]:8.4f}  residual {trace.residual[-1]:.2e}")


res = sadmm.run(model, db, params, np.random.default_rng(1), callback=progress)
avg = res.trace.avg_objective[-1]
print(f"final running average {avg:.4f} ({avg / opt - 1:+.2%} vs oracle)")
print("entered +/-10% band at iteration", sadmm.band_entry(res.trace.avg_objective, opt))
print("per-cell power", np.round(res.solution.P, 4), "QoS:", bool(check_qos(model, res.solution).all()))
