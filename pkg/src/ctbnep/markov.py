"""Numerical core for homogeneous Markov processes over an interval.

The central object is :class:`IntervalProcess`: an unnormalized forward
vector ``alpha`` at the interval start, a dynamics matrix ``Q``, and an
unnormalized backward vector ``beta`` at the interval end.  Everything a
cluster needs — point posteriors, evidence likelihoods, expected residence
times E[T[x]] and transition counts E[M[x,x']] — is computed from that
triple.

Expected statistics are obtained by integrating, forward in time, the
coupled linear system

    f'(t) = f(t) Q                      (filtered forward vector)
    U'(t) = f(t)^T beta^T + U(t) Q^T    (end-anchored outer-product integral)

with an adaptive Cash-Karp 4(5) embedded Runge-Kutta pair.  At the end of
the interval U[x, y] = integral of f_x(t) * b_y(t) dt where
b(t) = exp(Q (t2 - t)) beta, so E[T[x]] = U[x, x] / Z and
E[M[x, x']] = q_{xx'} U[x, x'] / Z.  Both equations are stable in the
forward direction, unlike naive forward integration of the backward
vector.  When per-step cumulative statistics are requested (for split
search), each accepted step's increment is recovered exactly from the
stored step endpoints with a Van Loan block matrix exponential.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm as _dense_expm

from .errors import IntegrationError, ModelValidationError, ZeroProbabilityError
from .model import DynamicsMatrix, IntensityMatrix, SufficientStats

# Dimension above which expm actions switch from dense Pade scaling-and-
# squaring to direct RK integration of v' = vQ.
DENSE_EXPM_MAX_DIM = 64

# Entries propagated vectors may pick up from roundoff; anything in
# [NEG_CLIP, 0) is clipped to zero, more negative raises.
NEG_CLIP = -1e-10


@dataclass
class RkConfig:
    """Adaptive Runge-Kutta error control parameters."""

    rel_tol: float = 1e-6
    abs_tol: float = 1e-9
    min_step: float = 1e-13
    max_step: float = np.inf
    record_steps: bool = False

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ModelValidationError("tolerances must be positive")
        if self.min_step > self.max_step:
            raise ModelValidationError("min_step must not exceed max_step")


DEFAULT_RK = RkConfig()
TIGHT_RK = RkConfig(rel_tol=1e-10, abs_tol=1e-13)

# Cash-Karp 4(5) tableau.
_CK_C = np.array([0.0, 1 / 5, 3 / 10, 3 / 5, 1.0, 7 / 8])
_CK_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([3 / 10, -9 / 10, 6 / 5]),
    np.array([-11 / 54, 5 / 2, -70 / 27, 35 / 27]),
    np.array([1631 / 55296, 175 / 512, 575 / 13824, 44275 / 110592, 253 / 4096]),
]
_CK_B5 = np.array([37 / 378, 0.0, 250 / 621, 125 / 594, 0.0, 512 / 1771])
_CK_ERR = np.array([-277 / 64512, 0.0, 6925 / 370944, -6925 / 202752,
                    -277 / 14336, 277 / 7084])


def _rk_adaptive(rhs, y0: np.ndarray, span: float, cfg: RkConfig, on_accept=None,
                 what: str = "integration"):
    """Integrate y' = rhs(y) over [0, span] with the Cash-Karp pair.

    ``on_accept(t, y)`` is called after every accepted step (and once at
    t=0).  Returns the final state.  Raises IntegrationError when the
    required step falls below cfg.min_step.
    """
    if span < 0:
        raise ModelValidationError("negative integration span")
    y = np.array(y0, dtype=float)
    if on_accept is not None:
        on_accept(0.0, y)
    if span == 0:
        return y
    t = 0.0
    scale0 = np.abs(rhs(y)).max()
    h = min(span, cfg.max_step, 0.1 / scale0 if scale0 > 0 else span)
    h = max(h, cfg.min_step)
    ks = np.empty((6, y.size))
    while t < span:
        h = min(h, span - t)
        ks[0] = rhs(y)
        for i in range(1, 6):
            yi = y + h * (_CK_A[i] @ ks[:i]).reshape(y.shape)
            ks[i] = rhs(yi)
        y5 = y + h * (_CK_B5 @ ks).reshape(y.shape)
        err = h * (_CK_ERR @ ks).reshape(y.shape)
        tol = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(y), np.abs(y5))
        err_norm = np.sqrt(np.mean((err / tol) ** 2))
        if err_norm <= 1.0:
            t += h
            y = y5
            if on_accept is not None:
                on_accept(t, y)
            grow = 0.9 * err_norm ** -0.2 if err_norm > 0 else 5.0
            h = min(h * min(grow, 5.0), cfg.max_step)
        else:
            h *= max(0.9 * err_norm ** -0.25, 0.2)
        if h < cfg.min_step and t + h < span:
            raise IntegrationError(
                f"{what}: required step {h:.3e} below min_step {cfg.min_step:.3e} "
                f"at t={t:.6g} of span {span:.6g}"
            )
    return y


def _clip_negative(v: np.ndarray, what: str) -> np.ndarray:
    m = v.min() if v.size else 0.0
    if m < NEG_CLIP:
        raise IntegrationError(f"{what}: entry {m:.3e} more negative than roundoff allows")
    return np.maximum(v, 0.0)


_PROP_CACHE: dict = {}
_PROP_CACHE_MAX = 4096


def _propagator(q: DynamicsMatrix, t: float) -> np.ndarray:
    """Cached exp(Q t) for dense-path dimensions; calibration sweeps hit the
    same (matrix, duration) pairs over and over."""
    key = (id(q.entries), float(t))
    got = _PROP_CACHE.get(key)
    if got is not None and got[0] is q.entries:
        return got[1]
    if len(_PROP_CACHE) >= _PROP_CACHE_MAX:
        _PROP_CACHE.clear()
    out = _dense_expm(q.entries * t)
    _PROP_CACHE[key] = (q.entries, out)  # hold the array so the id stays valid
    return out


def expm_action(v: np.ndarray, q: DynamicsMatrix, t: float, cfg: RkConfig = None) -> np.ndarray:
    """Row-vector action v @ exp(Q t).

    Uses dense Pade scaling-and-squaring for dimensions up to
    DENSE_EXPM_MAX_DIM and adaptive RK integration of v' = vQ above that.
    """
    if t < 0:
        raise ModelValidationError("expm_action needs t >= 0")
    v = np.asarray(v, dtype=float)
    if v.shape != (q.dim,):
        raise ModelValidationError("vector/matrix dimension mismatch")
    if t == 0 or not q.entries.any():
        return v.copy()
    if q.dim <= DENSE_EXPM_MAX_DIM:
        out = v @ _propagator(q, t)
    else:
        cfg = cfg or TIGHT_RK
        out = _rk_adaptive(lambda y: y @ q.entries, v, t, cfg, what="expm action")
    return _clip_negative(out, "expm action")


def expm_action_T(q: DynamicsMatrix, t: float, w: np.ndarray, cfg: RkConfig = None) -> np.ndarray:
    """Column-vector action exp(Q t) @ w (backward-vector propagation)."""
    if t < 0:
        raise ModelValidationError("expm_action_T needs t >= 0")
    w = np.asarray(w, dtype=float)
    if w.shape != (q.dim,):
        raise ModelValidationError("vector/matrix dimension mismatch")
    if t == 0 or not q.entries.any():
        return w.copy()
    if q.dim <= DENSE_EXPM_MAX_DIM:
        out = _propagator(q, t) @ w
    else:
        cfg = cfg or TIGHT_RK
        out = _rk_adaptive(lambda y: y @ q.entries.T, w, t, cfg, what="expm action")
    return _clip_negative(out, "expm action")


def rescaled(v: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale a nonnegative vector to unit max-norm, returning the log of
    the removed factor.  Zero vectors pass through with log-scale 0."""
    m = v.max() if v.size else 0.0
    if m <= 0:
        return v.copy(), 0.0
    return v / m, float(np.log(m))


@dataclass
class IntervalProcess:
    """Forward vector, dynamics, and backward vector over [t1, t2].

    ``alpha`` lives at t1 and ``beta`` at t2; both are nonnegative and
    unnormalized, with their rescaling exponents accumulated in
    ``alpha_log_scale``/``beta_log_scale`` (their sum is the process's
    total log scale).
    """

    alpha: np.ndarray
    dynamics: DynamicsMatrix
    beta: np.ndarray
    t1: float
    t2: float
    alpha_log_scale: float = 0.0
    beta_log_scale: float = 0.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        n = self.dynamics.dim
        if self.alpha.shape != (n,) or self.beta.shape != (n,):
            raise ModelValidationError("alpha/beta dimensions do not match dynamics")
        if self.alpha.min() < 0 or self.beta.min() < 0:
            raise ModelValidationError("alpha/beta must be nonnegative")
        if not self.alpha.any() or not self.beta.any():
            raise ModelValidationError("alpha and beta each need a positive entry")
        if not self.t1 < self.t2:
            raise ModelValidationError(f"need t1 < t2, got [{self.t1}, {self.t2}]")

    @property
    def log_scale(self) -> float:
        return self.alpha_log_scale + self.beta_log_scale

    @property
    def span(self) -> float:
        return self.t2 - self.t1


def point_posterior(p: IntervalProcess, t: float, cfg: RkConfig = None):
    """Normalized state distribution at time t in [t1, t2], plus ln Z.

    Z is the normalizing constant alpha exp(Q(t - t1)) . exp(Q(t2 - t)) beta,
    the probability of the evidence the process carries; ln Z includes the
    accumulated log scale.
    """
    if not p.t1 - 1e-12 <= t <= p.t2 + 1e-12:
        raise ModelValidationError(f"query time {t} outside [{p.t1}, {p.t2}]")
    t = min(max(t, p.t1), p.t2)
    f = expm_action(p.alpha, p.dynamics, t - p.t1, cfg)
    b = expm_action_T(p.dynamics, p.t2 - t, p.beta, cfg)
    u = f * b
    z = u.sum()
    if z <= 0:
        raise ZeroProbabilityError("evidence has probability zero on this interval")
    return u / z, float(np.log(z)) + p.log_scale


@dataclass
class StepRecord:
    """Accepted integrator step boundaries with cumulative statistics.

    ``times[k]`` is the k-th accepted boundary (times[0] = t1, times[-1] =
    t2); ``cum_residence[k]`` and ``cum_transitions[k]`` are the expected
    statistics of the posterior restricted to [t1, times[k]], already
    normalized by Z.  ``forward[k]``/``backward[k]`` hold the filtered and
    backward vectors at the boundary, each rescaled to unit max norm
    (normalize ``forward[k] * backward[k]`` for the point posterior there).
    """

    times: np.ndarray
    cum_residence: np.ndarray    # (K, n)
    cum_transitions: np.ndarray  # (K, n, n)
    forward: np.ndarray          # (K, n)
    backward: np.ndarray         # (K, n)


def _van_loan_increment(q: np.ndarray, f_left: np.ndarray, b_right: np.ndarray,
                        h: float) -> np.ndarray:
    """integral over [0, h] of (f_left exp(Q u))^T (exp(Q (h-u)) b_right)^T du,
    via the upper-right block of a 2n x 2n matrix exponential."""
    n = q.shape[0]
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = q.T
    blk[n:, n:] = q.T
    blk[:n, n:] = np.outer(f_left, b_right)
    return _dense_expm(blk * h)[:n, n:]


# Above this dimension the per-step recording falls back from the n^3
# propagator tensor to per-step Van Loan block exponentials.
TENSOR_RECORD_MAX_DIM = 12


def _record_from_tensor(p, ts, fs, lf, gs, q, n):
    """Cumulative statistics at the accepted boundaries from the stored
    propagator tensors: C(t_k) = G(t_k) . b(t_k), with the backward
    vectors recovered by a stable right-to-left sweep."""
    ksteps = len(ts)
    bs = np.empty_like(fs)
    lb = np.empty(ksteps)
    bs[-1], lb[-1] = rescaled(p.beta)
    for i in range(ksteps - 2, -1, -1):
        b = expm_action_T(p.dynamics, ts[i + 1] - ts[i], bs[i + 1])
        bs[i], s = rescaled(b)
        lb[i] = lb[i + 1] + s
    z_step = float(fs[-1] @ bs[-1])
    if z_step <= 0:
        raise ZeroProbabilityError("evidence probability vanished in step records")
    log_z_rec = np.log(z_step) + lf[-1] + lb[-1]
    cum = np.empty((ksteps, n, n))
    for i in range(ksteps):
        cum[i] = (gs[i] @ bs[i]) * np.exp(lf[i] + lb[i] - log_z_rec)
    return bs, np.maximum(cum, 0.0)


def _record_from_van_loan(p, ts, fs, lf, q, n):
    """Per-step increments via Van Loan block exponentials (exact given the
    step endpoints); used when the propagator tensor would be too large."""
    ksteps = len(ts)
    bs = np.empty_like(fs)
    lb = np.empty(ksteps)
    bs[-1], lb[-1] = rescaled(p.beta)
    for i in range(ksteps - 2, -1, -1):
        b = expm_action_T(p.dynamics, ts[i + 1] - ts[i], bs[i + 1])
        bs[i], s = rescaled(b)
        lb[i] = lb[i + 1] + s
    z_step = float(fs[-1] @ bs[-1])
    if z_step <= 0:
        raise ZeroProbabilityError("evidence probability vanished in step records")
    log_z_rec = np.log(z_step) + lf[-1] + lb[-1]
    cum = np.zeros((ksteps, n, n))
    for i in range(1, ksteps):
        h = ts[i] - ts[i - 1]
        inc = _van_loan_increment(q, fs[i - 1], bs[i], h)
        cum[i] = cum[i - 1] + inc * np.exp(lf[i - 1] + lb[i] - log_z_rec)
    return bs, np.maximum(cum, 0.0)


def expected_stats(p: IntervalProcess, cfg: RkConfig = None):
    """Expected sufficient statistics of the posterior over [t1, t2].

    Returns ``(stats, ln_z, record)`` where ``stats`` holds

        E[T[x]]     = (1/Z) int alpha exp(Q(t-t1)) D_{x,x} exp(Q(t2-t)) beta dt
        E[M[x,x']]  = (q_{xx'}/Z) int ... D_{x,x'} ... dt

    so that the residence times over all states sum to t2 - t1.  ``record``
    is a StepRecord when cfg.record_steps is set, else None.

    Without recording the integrated state is [f, U] with U the
    end-anchored outer-product integral (n + n^2 entries).  With recording
    on small dimensions the U block is widened to the propagator tensor
    G[x, y, j] = int f_x(u) exp(Q(s-u))[y, j] du (n^3 entries), from which
    the cumulative statistics at every accepted boundary follow as
    G(t_k) b(t_k) at the cost of one backward vector sweep.
    """
    cfg = cfg or DEFAULT_RK
    q = p.dynamics.entries
    n = p.dynamics.dim
    span = p.span
    beta = p.beta
    tensor = cfg.record_steps and n <= TENSOR_RECORD_MAX_DIM
    diag_idx = np.arange(n)

    if tensor:
        def rhs(y):
            f = y[:n]
            g = y[n:].reshape(n, n, n)
            dg = np.matmul(q, g)  # batched over the leading (x) axis
            dg[:, diag_idx, diag_idx] += f[:, None]
            return np.concatenate([f @ q, dg.ravel()])
        y0 = np.concatenate([p.alpha, np.zeros(n * n * n)])
    else:
        def rhs(y):
            f = y[:n]
            u = y[n:].reshape(n, n)
            return np.concatenate([f @ q, (np.outer(f, beta) + u @ q.T).ravel()])
        y0 = np.concatenate([p.alpha, np.zeros(n * n)])

    accepted_t: list = []
    accepted_f: list = []
    accepted_lf: list = []  # log scale so the true forward vector is f * exp(lf)
    accepted_g: list = []
    rescale_log = [0.0]

    def on_accept(t, y):
        m = np.abs(y[:n]).max()
        if 0 < m < 1e-120:  # keep the linear system in float range
            y /= m
            rescale_log[0] += np.log(m)
            m = 1.0
        if not cfg.record_steps:
            return
        accepted_t.append(t)
        scale = m if m > 0 else 1.0
        accepted_f.append(y[:n] / scale)
        accepted_lf.append(rescale_log[0] + np.log(scale))
        if tensor:
            accepted_g.append(y[n:].reshape(n, n, n) / scale)

    y_end = _rk_adaptive(rhs, y0, span, cfg, on_accept=on_accept,
                         what=f"expected stats on [{p.t1:.6g}, {p.t2:.6g}]")
    f_end = y_end[:n]
    if tensor:
        u_end = y_end[n:].reshape(n, n, n) @ beta
    else:
        u_end = y_end[n:].reshape(n, n)
    z = float(f_end @ beta)
    if z <= 0:
        raise ZeroProbabilityError(
            f"evidence probability vanished on [{p.t1:.6g}, {p.t2:.6g}]"
        )
    ln_z = float(np.log(z)) + rescale_log[0] + p.log_scale
    u_over_z = u_end / z

    record = None
    if cfg.record_steps:
        ts = np.array(accepted_t)
        fs = np.array(accepted_f)
        lf = np.array(accepted_lf)
        if tensor:
            bs, cum = _record_from_tensor(p, ts, fs, lf, accepted_g, q, n)
        else:
            bs, cum = _record_from_van_loan(p, ts, fs, lf, q, n)
        res = np.maximum(np.einsum("kii->ki", cum), 0.0).copy()
        trans = np.maximum(cum * q[None, :, :], 0.0)
        for arr in trans:
            np.fill_diagonal(arr, 0.0)
        record = StepRecord(ts + p.t1, res, trans, fs, bs)
        # Keep totals exactly consistent with the recorded cumulative stats.
        u_over_z = cum[-1]
    residence = np.maximum(np.diag(u_over_z), 0.0).copy()
    trans = np.maximum(q * u_over_z, 0.0)
    np.fill_diagonal(trans, 0.0)
    stats = SufficientStats(p.dynamics.scope, residence, trans)
    return stats, ln_z, record


def project_homogeneous(stats: SufficientStats) -> IntensityMatrix:
    """KL-minimizing projection into homogeneous Markov processes by moment
    matching: q_{yy'} = E[M[y,y']] / E[T[y]].

    States with zero residence and zero outgoing transitions get an all-zero
    rate row (unreachable-state convention); zero residence with nonzero
    transitions is degenerate and raises.
    """
    res = stats.residence
    out_rate = np.zeros_like(stats.transitions)
    for i in range(len(res)):
        row = stats.transitions[i]
        if res[i] <= 0.0:
            if row.max(initial=0.0) > 0.0:
                from .errors import DegenerateStateError
                raise DegenerateStateError(
                    f"state {i} has zero residence but expected transitions"
                )
            continue
        out_rate[i] = row / res[i]
    np.fill_diagonal(out_rate, 0.0)
    np.fill_diagonal(out_rate, -out_rate.sum(axis=1))
    return IntensityMatrix(stats.scope, out_rate)
