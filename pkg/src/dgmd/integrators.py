"""Time steppers and the trajectory loop.

The conserving stepper advances positions with a trapezoidal drift and
closes momenta with the discrete gradient evaluated between the old and new
positions, making the energy balance of every step an algebraic identity
rather than a truncation estimate.  Stormer-Verlet and the implicit midpoint
rule are provided as references: both are second order and symplectic, and
both show the usual bounded-but-nonzero energy oscillation the conserving
stepper removes.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import (DiagnosticsRecord, SolverFailure, StepFailure,
                   kinetic_energy, total_angular_momentum,
                   total_linear_momentum)
from .solver import SolverSettings, newton_solve

INTEGRATORS = ("dg", "verlet", "midpoint")


@dataclass
class StepOutput:
    q: np.ndarray
    p: np.ndarray
    potential: float | None
    newton_iterations: int = 0
    cg_iterations: int = 0
    grad_cache: np.ndarray | None = None


def velocity_dg_step(engine, q, p, tau, variant="symmetric", settings=None):
    """One energy-conserving step.

    Solves u = q + tau*M^-1*p - (tau^2/2)*M^-1*g(q, u) for the new positions
    with g the discrete gradient, then closes p' = p - tau*g(q, u).  Kinetic
    plus potential energy changes only by the inner product of g with the
    final Newton residual, so the solver tolerance is the conservation
    budget per step.
    """
    settings = settings if settings is not None else SolverSettings()
    inv_m = 1.0 / engine.mass[:, None]
    engine.begin_step(q, p, tau)
    drift = q + tau * (p * inv_m)
    half = 0.5 * tau * tau

    def residual(u):
        ev = engine.dg_assemble(q, u, variant)
        return u - drift + half * (inv_m * ev.gradient), ev

    scale = half if settings.jacobian == "full" else 0.5 * half

    def jacobian_at(u, ev):
        lin = engine.linearize_dg(q, u, settings.jacobian)

        def apply(v):
            return v + scale * (inv_m * engine.apply_linearized(lin, v))

        return apply

    u, ev, rep = newton_solve(residual, jacobian_at, drift, settings)
    p_next = p - tau * ev.gradient
    return StepOutput(u, p_next, ev.v_u,
                      rep.newton_iterations, rep.cg_iterations)


def verlet_step(engine, q, p, tau, grad_cache=None):
    """Kick-drift-kick Stormer-Verlet; reuses the closing force of the
    previous step when the caller passes it back in."""
    inv_m = 1.0 / engine.mass[:, None]
    engine.begin_step(q, p, tau)
    if grad_cache is None:
        grad_cache = engine.force_assemble(q).gradient
    p_half = p - 0.5 * tau * grad_cache
    q_next = q + tau * (p_half * inv_m)
    ev = engine.force_assemble(q_next)
    p_next = p_half - 0.5 * tau * ev.gradient
    return StepOutput(q_next, p_next, ev.potential, grad_cache=ev.gradient)


def implicit_midpoint_step(engine, q, p, tau, settings=None):
    """Implicit midpoint rule, solved with the same Newton machinery."""
    settings = settings if settings is not None else SolverSettings()
    inv_m = 1.0 / engine.mass[:, None]
    engine.begin_step(q, p, tau)
    drift = q + tau * (p * inv_m)
    half = 0.5 * tau * tau

    def residual(u):
        ev = engine.force_assemble(0.5 * (q + u))
        return u - drift + half * (inv_m * ev.gradient), ev

    def jacobian_at(u, ev):
        lin = engine.linearize_force(0.5 * (q + u))

        def apply(v):
            return v + 0.5 * half * (inv_m * engine.apply_linearized(lin, v))

        return apply

    u, ev, rep = newton_solve(residual, jacobian_at, drift, settings)
    p_next = p - tau * ev.gradient
    return StepOutput(u, p_next, None,
                      rep.newton_iterations, rep.cg_iterations)


@dataclass
class RunResult:
    q: np.ndarray
    p: np.ndarray
    records: list = field(default_factory=list)

    @property
    def energies(self):
        return np.array([r.total for r in self.records])

    @property
    def times(self):
        return np.array([r.time for r in self.records])


def _make_record(step, time, engine, q, p, potential, newton, cg):
    kin = kinetic_energy(p, engine.mass)
    return DiagnosticsRecord(
        step=step, time=time, kinetic=kin, potential=potential,
        total=kin + potential,
        momentum=total_linear_momentum(p),
        angular_momentum=total_angular_momentum(q, p),
        newton_iterations=newton, cg_iterations=cg)


def run_simulation(engine, tau, n_steps, integrator="dg", variant="symmetric",
                   settings=None, record_every=1, on_record=None,
                   on_frame=None):
    """Advance the engine's system n_steps and collect diagnostics.

    Records are taken at step 0, every record_every-th step and the final
    step; `on_record(record)` and `on_frame(record, q, p)` fire at the same
    cadence.  A solver breakdown is rethrown as StepFailure tagged with the
    step index; the exception keeps the best iterate for post-mortems.
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"unknown integrator {integrator!r}; "
                         f"expected one of {INTEGRATORS}")
    if tau <= 0.0 or n_steps < 0:
        raise ValueError("need tau > 0 and n_steps >= 0")
    q = engine.system.q.copy()
    p = engine.system.p.copy()
    records = [_make_record(0, 0.0, engine, q, p, engine.potential(q), 0, 0)]
    if on_record is not None:
        on_record(records[-1])
    if on_frame is not None:
        on_frame(records[-1], q, p)
    grad_cache = None
    for step in range(1, n_steps + 1):
        try:
            if integrator == "dg":
                out = velocity_dg_step(engine, q, p, tau, variant, settings)
            elif integrator == "verlet":
                out = verlet_step(engine, q, p, tau, grad_cache)
                grad_cache = out.grad_cache
            else:
                out = implicit_midpoint_step(engine, q, p, tau, settings)
        except SolverFailure as exc:
            raise StepFailure(f"step {step}: {exc}", step=step) from exc
        engine.end_step(q, out.q)
        q, p = out.q, out.p
        if step % record_every == 0 or step == n_steps:
            pot = out.potential
            if pot is None:
                pot = engine.potential(q)
            rec = _make_record(step, step * tau, engine, q, p, pot,
                               out.newton_iterations, out.cg_iterations)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if on_frame is not None:
                on_frame(rec, q, p)
    return RunResult(q, p, records)
