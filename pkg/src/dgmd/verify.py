"""Runtime invariant suite for a configured system.

Each check re-derives a structural property of the method on the actual
configured system: the discrete gradient's defining identity, consistency
with the analytic gradient, short-run conservation, time reversibility and
(for decomposed runs) agreement between rank counts.  The suite is what the
``check`` subcommand runs; tests reuse it on the bundled experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import build_engine, build_system
from .core import total_linear_momentum
from .integrators import run_simulation

DEFINING_TOL = 1e-11
GRADIENT_TOL = 1e-10
FD_TOL = 1e-6
DRIFT_TOL = 1e-8
REVERSAL_TOL = 1e-8
PARALLEL_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _fresh(config, ranks=None):
    system, topology = build_system(config)
    return build_engine(config, system, topology, ranks=ranks)


def check_defining_identity(config, spread=0.05, trials=4):
    """<DG(q,u), u-q> must equal V(u)-V(q) for every variant."""
    engine = _fresh(config)
    rng = np.random.default_rng(config.seed + 1)
    q = engine.system.q.copy()
    worst = 0.0
    for _ in range(trials):
        u = q + spread * rng.standard_normal(q.shape)
        engine.begin_step(q, engine.system.p, config.tau)
        for variant in ("left", "right", "symmetric"):
            ev = engine.dg_assemble(q, u, variant=variant)
            gap = abs(float(np.vdot(ev.gradient, u - q))
                      - (ev.v_u - ev.v_q))
            tol = DEFINING_TOL * (1.0 + abs(ev.v_q) + abs(ev.v_u))
            worst = max(worst, gap / tol)
    return CheckResult("discrete-gradient identity", worst <= 1.0,
                       f"worst gap {worst:.3e} of tolerance")


def check_gradient_consistency(config, sample=12, h=1e-6):
    """DG at u=q matches the analytic gradient; gradient matches central FD."""
    engine = _fresh(config)
    q = engine.system.q.copy()
    engine.begin_step(q, engine.system.p, config.tau)
    ev = engine.dg_assemble(q, q.copy())
    fv = engine.force_assemble(q)
    scale = 1.0 + np.abs(fv.gradient).max()
    gap_dg = np.abs(ev.gradient - fv.gradient).max() / scale

    rng = np.random.default_rng(config.seed + 2)
    flat = fv.gradient.ravel()
    idx = rng.choice(flat.size, size=min(sample, flat.size), replace=False)
    gap_fd = 0.0
    for k in idx:
        qp = q.copy().ravel()
        qm = q.copy().ravel()
        qp[k] += h
        qm[k] -= h
        vp = engine.potential(qp.reshape(q.shape))
        vm = engine.potential(qm.reshape(q.shape))
        fd = (vp - vm) / (2.0 * h)
        gap_fd = max(gap_fd,
                     abs(fd - flat[k]) / (1.0 + max(abs(fd), abs(flat[k]))))
    passed = gap_dg <= GRADIENT_TOL and gap_fd <= FD_TOL
    return CheckResult(
        "gradient consistency", passed,
        f"DG-vs-analytic {gap_dg:.3e}, analytic-vs-FD {gap_fd:.3e}")


def check_conservation(config, steps=50):
    """Short run: total energy and linear momentum must hold."""
    engine = _fresh(config)
    result = run_simulation(engine, config.tau, steps,
                            integrator=config.integrator,
                            variant=config.dg_variant,
                            settings=config.solver)
    e = result.energies
    drift = float(np.abs(e - e[0]).max() / max(abs(e[0]), 1e-300))
    p0 = total_linear_momentum(engine.system.p)
    dp = float(np.abs(total_linear_momentum(result.p) - p0).max())
    pscale = 1.0 + float(np.abs(engine.system.p).max())
    passed = dp <= 1e-12 * pscale
    if config.integrator == "dg":
        passed = passed and drift <= DRIFT_TOL
    return CheckResult(
        "conservation", passed,
        f"{steps} steps: energy drift {drift:.3e} rel, momentum {dp:.3e}")


def check_reversibility(config, steps=25):
    """Forward, negate momenta, return; DG-symmetric must come back."""
    if config.integrator != "dg" or config.dg_variant != "symmetric":
        return CheckResult("reversibility", True,
                           "skipped (needs dg + symmetric)")
    system, topology = build_system(config)
    q0 = system.q.copy()
    p0 = system.p.copy()
    engine = build_engine(config, system, topology)
    fwd = run_simulation(engine, config.tau, steps, integrator="dg",
                         variant="symmetric", settings=config.solver)
    # A fresh engine re-derives ownership and cell state from the turned
    # state; in-place mutation of a live engine's system is not supported.
    system.q[:] = fwd.q
    system.p[:] = -fwd.p
    back = run_simulation(build_engine(config, system, topology),
                          config.tau, steps, integrator="dg",
                          variant="symmetric", settings=config.solver)
    scale = 1.0 + float(np.abs(q0).max())
    gap_q = float(np.abs(back.q - q0).max()) / scale
    gap_p = float(np.abs(back.p + p0).max()) / (1.0 + np.abs(p0).max())
    passed = gap_q <= REVERSAL_TOL and gap_p <= REVERSAL_TOL
    return CheckResult("reversibility", passed,
                       f"{steps}+{steps} steps: |dq| {gap_q:.3e}, "
                       f"|dp| {gap_p:.3e}")


def check_parallel_agreement(config, ranks, steps=10):
    """Same trajectory on one rank and on the decomposed fabric."""
    if ranks < 2:
        return CheckResult("parallel agreement", True,
                           "skipped (single rank)")
    solo = run_simulation(_fresh(config, ranks=1), config.tau, steps,
                          integrator=config.integrator,
                          variant=config.dg_variant, settings=config.solver)
    multi = run_simulation(_fresh(config, ranks=ranks), config.tau, steps,
                           integrator=config.integrator,
                           variant=config.dg_variant, settings=config.solver)
    de = float(np.abs(solo.energies - multi.energies).max()
               / max(abs(solo.energies[0]), 1e-300))
    dq = float(np.abs(solo.q - multi.q).max())
    passed = de <= PARALLEL_TOL and dq <= 1e-10
    return CheckResult("parallel agreement", passed,
                       f"{steps} steps at {ranks} ranks: energy {de:.3e} rel, "
                       f"positions {dq:.3e}")


def run_checks(config, ranks=None, steps=50):
    ranks = config.ranks if ranks is None else int(ranks)
    checks = [
        check_defining_identity(config),
        check_gradient_consistency(config),
        check_conservation(config, steps=steps),
        check_reversibility(config),
        check_parallel_agreement(config, ranks),
    ]
    return checks
