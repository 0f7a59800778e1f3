"""Time-step refinement studies and empirical order estimation.

Two protocols cover the practical cases:

* ``fine_reference`` integrates a much finer proxy for the exact solution
  (default the same method at min(tau)/16) and measures terminal-state errors
  against it.  Points outside the asymptotic regime, where the error is not
  small next to the reference state norm, are dropped before fitting.
* ``sequential`` measures the difference between terminal states of
  neighboring ladder rungs; for an order-p method the differences scale as
  tau^p times a constant factor, so no reference run is needed.  This suits
  stiff systems whose fine-reference runs would dominate the cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError
from .integrators import run_simulation

ASYMPTOTIC_FRACTION = 0.1


@dataclass
class ConvergenceResult:
    taus: np.ndarray
    errors: np.ndarray
    slope: float
    protocol: str
    ref_tau: float | None = None
    dropped: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.taus, self.errors))


def estimate_order(taus, errors):
    """Least-squares slope of log(error) against log(tau)."""
    taus = np.asarray(taus, float)
    errors = np.asarray(errors, float)
    if len(taus) < 2:
        raise ConfigurationError("order estimate needs at least two points")
    if np.any(errors <= 0):
        raise ConfigurationError("order estimate needs positive errors")
    return float(np.polyfit(np.log(taus), np.log(errors), 1)[0])


def _terminal_state(make_engine, tau, n_steps, integrator, variant, settings):
    result = run_simulation(make_engine(), tau, n_steps,
                            integrator=integrator, variant=variant,
                            settings=settings)
    return result.q


def convergence_study(make_engine, taus, t_max, integrator="dg",
                      variant="symmetric", settings=None,
                      protocol="fine_reference", ref_tau=None,
                      ref_integrator=None, ref_variant=None, q_ref=None):
    """Terminal-state error ladder over the given tau grid.

    `make_engine` must build a fresh engine (fresh initial state) per call.
    Each tau must divide t_max to machine accuracy so every run lands on the
    same final time.  A precomputed terminal reference state `q_ref` (for
    example shared between several ladders) skips the reference run.
    Returns a ConvergenceResult whose slope is fitted over the points that
    survive the asymptotic filter.
    """
    taus = np.asarray(sorted(set(float(t) for t in taus), reverse=True))
    if len(taus) < 2:
        raise ConfigurationError("a tau ladder needs at least two rungs")
    steps = []
    for tau in taus:
        n = int(round(t_max / tau))
        if abs(n * tau - t_max) > 1e-9 * t_max:
            raise ConfigurationError(
                f"tau {tau!r} does not divide the horizon {t_max!r}")
        steps.append(n)

    finals = [_terminal_state(make_engine, tau, n, integrator, variant,
                              settings) for tau, n in zip(taus, steps)]

    if protocol == "fine_reference":
        if q_ref is None:
            if ref_tau is None:
                ref_tau = taus.min() / 16.0
            n_ref = int(round(t_max / ref_tau))
            if abs(n_ref * ref_tau - t_max) > 1e-9 * t_max:
                raise ConfigurationError(
                    f"reference tau {ref_tau!r} does not divide the horizon")
            q_ref = _terminal_state(
                make_engine, ref_tau, n_ref,
                integrator if ref_integrator is None else ref_integrator,
                variant if ref_variant is None else ref_variant, settings)
        errors = np.array([np.linalg.norm(q - q_ref) for q in finals])
        scale = np.linalg.norm(q_ref)
        keep = errors <= ASYMPTOTIC_FRACTION * scale
        dropped = [float(t) for t in taus[~keep]]
        if keep.sum() < 2:
            raise ConfigurationError(
                "fewer than two ladder points inside the asymptotic regime")
        slope = estimate_order(taus[keep], errors[keep])
        return ConvergenceResult(taus[keep], errors[keep], slope,
                                 protocol, ref_tau=float(ref_tau),
                                 dropped=dropped)

    if protocol == "sequential":
        errors = np.array([np.linalg.norm(a - b)
                           for a, b in zip(finals[:-1], finals[1:])])
        slope = estimate_order(taus[:-1], errors)
        return ConvergenceResult(taus[:-1], errors, slope, protocol)

    raise ConfigurationError(f"unknown protocol {protocol!r}")


def ladder_from_config(base_tau, rungs=4, factor=2.0):
    """Geometric tau grid starting at base_tau, descending by `factor`."""
    if rungs < 2:
        raise ConfigurationError("need at least two rungs")
    return [base_tau / factor ** k for k in range(rungs)]
