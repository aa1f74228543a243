"""Bounded Levenberg-Marquardt with projection onto box constraints."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    rms: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)
    n_evals: int = 0


def _rms(r):
    return float(np.sqrt(np.mean(r**2))) if r.size else 0.0


def levenberg_marquardt(
    fun,
    x0,
    lower,
    upper,
    jac=None,
    fd_step=1e-4,
    max_iter=50,
    rms_tol=1e-4,
    lam0=1e-3,
    lam_max=1e10,
):
    """Minimize ``0.5*||fun(x)||^2`` over the box ``[lower, upper]``.

    ``jac(x, r)`` may supply the Jacobian; otherwise forward differences of
    ``fd_step`` native units are used (stepping inward at an upper bound).
    Stops when an accepted step improves the residual RMS by less than
    ``rms_tol`` or after ``max_iter`` iterations. ``history`` holds the RMS
    after every accepted iterate, starting with the initial point.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    x = np.clip(np.asarray(x0, float), lower, upper)
    r = np.asarray(fun(x), float)
    n_evals = 1
    cost = float(r @ r)
    history = [_rms(r)]
    lam = lam0
    converged = False
    it = 0
    if cost == 0.0:
        return LMResult(x, r, 0.0, 0, True, history, n_evals)

    for it in range(1, max_iter + 1):
        if jac is None:
            J = np.empty((r.size, x.size))
            for p in range(x.size):
                h = fd_step if x[p] + fd_step <= upper[p] else -fd_step
                xp = x.copy()
                xp[p] += h
                J[:, p] = (np.asarray(fun(xp), float) - r) / h
                n_evals += 1
        else:
            J = np.asarray(jac(x, r), float)
        A = J.T @ J
        g = J.T @ r
        d = np.diag(A).copy()
        d[d <= 0] = max(float(d.max()) * 1e-12, 1e-30) if d.size else 1.0
        if np.max(np.abs(g)) <= 1e-14 * max(1.0, cost):
            converged = True
            break
        accepted = False
        while lam <= lam_max:
            try:
                step = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + step, lower, upper)
            if np.array_equal(x_new, x):
                break
            r_new = np.asarray(fun(x_new), float)
            n_evals += 1
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent left inside the box
            converged = True
            break
        improvement = _rms(r) - _rms(r_new)
        x, r, cost = x_new, r_new, cost_new
        history.append(_rms(r))
        lam = max(lam / 10.0, 1e-12)
        if improvement < rms_tol:
            converged = True
            break
    return LMResult(x, r, _rms(r), it, converged, history, n_evals)
