"""Levenberg-Marquardt over a sparse least-squares problem.

The solver only needs an object with ``evaluate(x, jacobian=True)`` returning
something with ``residuals``, ``jacobian`` (sparse or dense) and ``energy``;
``WarpProblem`` and the small closures used in tests both qualify.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .types import SingularSystem

logger = logging.getLogger(__name__)

MAX_RETRIES = 10
MU_SINGULAR = 1e8


@dataclass
class SolverConfig:
    mu_init: float = 1e-3
    mu_up: float = 10.0
    mu_down: float = 0.5
    max_iters: int = 20
    rel_tol: float = 1e-6
    step_tol: float = 1e-8

    def __post_init__(self):
        if not (self.mu_up > 1.0 > self.mu_down > 0.0):
            raise ValueError("need mu_up > 1 > mu_down > 0")


@dataclass
class SolveReport:
    iterations: int
    initial_energy: float
    final_energy: float
    term_energies: dict
    reason: str  # converged_rel | converged_step | max_iters | stalled
    mu: float
    energy_trace: list = field(default_factory=list)  # accepted energies, starting with the initial one
    trace: list = field(default_factory=list)  # (iteration, trial energy, mu, accepted)


def damped_step(J, r: np.ndarray, mu: float) -> np.ndarray:
    """Solve ``(J^T J + mu I) dx = -J^T r``."""
    if sp.issparse(J):
        J = J.tocsc()
        H = (J.T @ J + mu * sp.identity(J.shape[1], format="csc")).tocsc()
        g = J.T @ r
        try:
            lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A")
            dx = -lu.solve(g)
        except RuntimeError as exc:  # exactly singular factor
            raise np.linalg.LinAlgError(str(exc)) from exc
    else:
        J = np.asarray(J, dtype=np.float64)
        H = J.T @ J + mu * np.eye(J.shape[1])
        dx = -np.linalg.solve(H, J.T @ r)
    if not np.all(np.isfinite(dx)):
        raise np.linalg.LinAlgError("non-finite step")
    return dx


def lm_solve(problem, x0: np.ndarray, cfg: SolverConfig | None = None):
    """Minimise ``problem``'s energy starting from ``x0``.

    Returns ``(x, report, state)`` where ``state`` is the evaluation at ``x``.
    A step is accepted only if it lowers the energy, so the returned energy
    never exceeds the starting one.
    """
    cfg = cfg or SolverConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    begin = getattr(problem, "begin_iteration", None)
    revert = getattr(problem, "revert_iteration", None)

    def linearize(x):
        # problems with data-dependent terms (pixel association) refresh them here
        if begin is not None:
            begin(x)
        return problem.evaluate(x, jacobian=True)

    state = linearize(x)
    e0 = state.energy
    energy = e0
    mu = cfg.mu_init
    accepted_trace = [e0]
    trace = []
    reason = "max_iters"
    it = 0
    while it < cfg.max_iters:
        if energy <= 0.0:
            reason = "converged_rel"
            break
        it += 1
        J, r = state.jacobian, state.residuals
        accepted = False
        for _ in range(MAX_RETRIES):
            try:
                dx = damped_step(J, r, mu)
            except np.linalg.LinAlgError:
                if mu >= MU_SINGULAR:
                    raise SingularSystem(f"factorisation failed at mu={mu:g}")
                mu *= cfg.mu_up
                continue
            trial = problem.evaluate(x + dx, jacobian=False)
            trace.append((it, trial.energy, mu, trial.energy < energy))
            if trial.energy < energy:
                accepted = True
                break
            mu *= cfg.mu_up
        if not accepted:
            reason = "stalled"
            break
        step_norm = float(np.linalg.norm(dx))
        x = x + dx
        decrease = energy - trial.energy
        prev = energy
        state = linearize(x)
        if state.energy > trial.energy and revert is not None:
            # fresh association scored worse than the one that accepted the
            # step; keep the old targets for this iteration
            revert()
            state = problem.evaluate(x, jacobian=True)
        energy = state.energy
        accepted_trace.append(energy)
        mu *= cfg.mu_down
        if decrease <= cfg.rel_tol * max(prev, 1e-300):
            reason = "converged_rel"
            break
        if step_norm <= cfg.step_tol * (1.0 + float(np.linalg.norm(x))):
            reason = "converged_step"
            break
    terms = dict(getattr(state, "energies", {}) or {})
    report = SolveReport(it, e0, energy, terms, reason, mu, accepted_trace, trace)
    return x, report, state
