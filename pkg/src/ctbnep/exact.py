"""Exact posterior inference by amalgamating the whole CTBN into one joint
Markov process.  Feasible only at desk scale; serves as the ground-truth
oracle for the approximate engine."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OracleInfeasibleError, ZeroProbabilityError
from .markov import RkConfig, TIGHT_RK, expm_action, expm_action_T, rescaled
from .model import (CtbnModel, DynamicsMatrix, IntervalEvidence, amalgamate,
                    marginalize_vector, reduce_matrix, reduce_point)

DEFAULT_STATE_CAP = 2 ** 16


@dataclass
class JointProcess:
    """The CTBN collapsed to a single Markov process over the joint space."""

    scope: tuple
    q_joint: DynamicsMatrix
    p0: np.ndarray

    @property
    def dim(self) -> int:
        return self.q_joint.dim


def build_joint(model: CtbnModel, state_cap: int = DEFAULT_STATE_CAP) -> JointProcess:
    """Amalgamate every CIM into the joint generator.

    The rate from joint state x to x' differing in exactly one variable X is
    the CIM entry for X under x's parent context; states differing in more
    than one variable get rate zero.
    """
    n = model.joint_size()
    if n > state_cap:
        raise OracleInfeasibleError(
            f"oracle infeasible: joint space has {n} states, cap is {state_cap}"
        )
    q = amalgamate([model.cims[v].as_joint() for v in model.variables],
                   scope=model.variables)
    p0 = model.initial.joint(model.variables)
    return JointProcess(tuple(model.variables), q, p0)


def _segments(jp: JointProcess, evidence: IntervalEvidence, horizon: float):
    """Evidence-homogeneous segments covering [0, horizon]: list of
    (t_start, t_end, reduced dynamics)."""
    cuts = sorted({0.0, float(horizon), *evidence.boundaries(lo=0.0, hi=horizon)})
    segs = []
    for a, b in zip(cuts, cuts[1:]):
        if b - a <= 1e-15:
            continue
        active = evidence.active(a, jp.scope)
        segs.append((a, b, reduce_matrix(jp.q_joint, active)))
    return segs


def _forward_pass(jp: JointProcess, evidence: IntervalEvidence, horizon: float,
                  cfg: RkConfig):
    """Forward vectors at segment starts: list of (t_start, t_end, Q_seg,
    alpha, log_scale), plus the final (t=horizon) vector and scale."""
    segs = _segments(jp, evidence, horizon)
    v = reduce_point(jp.p0, jp.scope, evidence.at_point(0.0, jp.scope))
    v, ls = rescaled(v)
    out = []
    for a, b, qseg in segs:
        v = reduce_point(v, jp.scope, evidence.starting_at(a, jp.scope))
        v, s = rescaled(v)
        ls += s
        out.append((a, b, qseg, v, ls))
        v = expm_action(v, qseg, b - a, cfg)
        v, s = rescaled(v)
        ls += s
    v = reduce_point(v, jp.scope, evidence.ending_at(horizon, jp.scope))
    v, s = rescaled(v)
    return out, v, ls + s


def _backward_pass(jp: JointProcess, evidence: IntervalEvidence, horizon: float,
                   cfg: RkConfig):
    """Backward vectors at segment ends: list aligned with _segments of
    (t_start, t_end, Q_seg, beta_at_end, log_scale)."""
    segs = _segments(jp, evidence, horizon)
    w = np.ones(jp.dim)
    ls = 0.0
    out = []
    for a, b, qseg in reversed(segs):
        w = reduce_point(w, jp.scope, evidence.ending_at(b, jp.scope))
        w, s = rescaled(w)
        ls += s
        out.append((a, b, qseg, w, ls))
        w = expm_action_T(qseg, b - a, w, cfg)
    out.reverse()
    return out


def exact_loglik(jp: JointProcess, evidence: IntervalEvidence,
                 horizon: float, cfg: RkConfig = None) -> float:
    """ln P(evidence) from the full forward pass (0 when no evidence)."""
    cfg = cfg or TIGHT_RK
    _, v_end, ls = _forward_pass(jp, evidence, horizon, cfg)
    z = v_end.sum()
    if z <= 0:
        raise ZeroProbabilityError("evidence has probability zero")
    return float(np.log(z)) + ls


def exact_marginals(jp: JointProcess, evidence: IntervalEvidence, horizon: float,
                    variables=None, times=None, cfg: RkConfig = None) -> dict:
    """Exact posteriors P(X^t | evidence) for each requested variable and time.

    Returns {variable: array of shape (len(times), cardinality)}.  Queries
    share one forward and one backward pass over the evidence segments;
    within a segment the forward vector is advanced incrementally across
    sorted query times.
    """
    cfg = cfg or TIGHT_RK
    variables = list(jp.scope) if variables is None else list(variables)
    times = np.atleast_1d(np.asarray(0.0 if times is None else times, dtype=float))
    if times.size and (times.min() < -1e-12 or times.max() > horizon + 1e-12):
        raise ValueError(f"query times outside [0, {horizon}]")
    fwd = _forward_pass(jp, evidence, horizon, cfg)[0]
    bwd = _backward_pass(jp, evidence, horizon, cfg)
    order = np.argsort(times, kind="stable")
    out = {v: np.empty((len(times), v.cardinality)) for v in variables}
    seg_i = 0
    cur_seg, cur_t, cur_v = -1, 0.0, None
    for qi in order:
        t = float(np.clip(times[qi], 0.0, horizon))
        while seg_i + 1 < len(fwd) and t >= fwd[seg_i][1] - 1e-15:
            seg_i += 1
        a, b, qseg, alpha, _ = fwd[seg_i]
        if seg_i != cur_seg or t < cur_t - 1e-15:
            cur_seg, cur_t, cur_v = seg_i, a, alpha
        f = expm_action(cur_v, qseg, max(t - cur_t, 0.0), cfg)
        cur_t, cur_v = t, rescaled(f)[0]  # scale cancels in the normalized query
        _, _, _, beta_end, _ = bwd[seg_i]
        bvec = expm_action_T(qseg, b - t, beta_end, cfg)
        u = f * bvec
        z = u.sum()
        if z <= 0:
            raise ZeroProbabilityError(f"evidence has probability zero at t={t}")
        joint = u / z
        for v in variables:
            out[v][qi] = marginalize_vector(joint, jp.scope, (v,))
    return out


def exact_marginal(jp: JointProcess, evidence: IntervalEvidence, var, t: float,
                   horizon: float, cfg: RkConfig = None) -> np.ndarray:
    """Exact posterior P(X^t | evidence) for one variable at one time."""
    return exact_marginals(jp, evidence, horizon, [var], [t], cfg)[var][0]
