"""Dynamic repartitioning of sepset messages.

A sepset message approximates the sending cluster's marginal over the
sepset scope by a single homogeneous process.  When the marginal's
behavior changes materially inside the interval, splitting the sepset in
two buys accuracy; this module prices that trade in KL nats.

Costs use the exponential-family identity

    D(P_C || P_S) = <E_C[tau(V)], eta_C> - <E_C[tau(V')], eta_S> - ln(Z_C/Z_S)

with natural parameters eta(Q) = {diagonal entries, ln of off-diagonal
entries}.  The cluster side is represented by its finest piecewise
description over the sepset scope (per sub-interval marginal statistics
with their moment-matched generators), which leaves the one-piece /
two-piece *difference* identical to the full-scope convention while
keeping every reported cost nonnegative.  Z_S uses the message's
evidence-free normalizer, i.e. the mass of its forward component (zero in
log space for the normalized messages this engine sends), and Z_C the
evidence-constrained normalizer from the statistics integration.

Candidate split points are exactly the accepted Runge-Kutta step
boundaries recorded while the message statistics were integrated: the
cumulative statistics are exact there, so evaluating a candidate costs
O(d^2) marginal work rather than a fresh integration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .clustergraph import ClusterGraph, Sepset, TIME_TOL, insert_demarcation
from .errors import DegenerateStateError, ModelValidationError
from .markov import RkConfig, expm_action, expm_action_T, project_homogeneous, rescaled
from .model import IntensityMatrix, SufficientStats, marginal_stats, scope_size


@dataclass
class SplitPolicy:
    """When to accept a split: minimum KL gain (nats), per-sepset per-sweep
    cap, and the shortest sub-interval worth creating."""

    threshold: float = 0.01
    max_splits_per_sepset_per_sweep: int = 1
    min_sub_interval: float = 1e-3

    def __post_init__(self):
        if self.threshold <= 0:
            raise ModelValidationError("split threshold must be positive")


@dataclass
class SplitCandidate:
    """A scored repartition point."""

    t_hat: float
    left_stats: SufficientStats
    right_stats: SufficientStats
    q_left: IntensityMatrix
    q_right: IntensityMatrix
    cost_one: float   # KL of the single-piece approximation
    cost_two: float   # KL of the two-piece approximation split at t_hat
    gain: float       # cost_one - cost_two (>= 0 up to roundoff)


def stats_inner(stats: SufficientStats, q) -> float:
    """<tau, eta(Q)>: residence against diagonal entries plus transition
    counts against log off-diagonal rates.  A positive expected count for a
    zero-rate transition contributes -inf (support mismatch)."""
    ent = q.entries if hasattr(q, "entries") else np.asarray(q, float)
    diag_term = float(np.diag(ent) @ stats.residence)
    off = ~np.eye(ent.shape[0], dtype=bool)
    log_term = float(np.sum(xlogy(stats.transitions[off], ent[off])))
    return diag_term + log_term


def kl_cost(cluster_pieces, ln_z_cluster: float, sepset_stats: SufficientStats,
            sepset_q, ln_z_sepset: float = 0.0, subset=None) -> float:
    """Projection cost D(P_C || P_S) in nats.

    ``cluster_pieces`` is the cluster side as [(SufficientStats, dynamics)]
    per homogeneous piece; ``sepset_stats`` the statistics marginalized to
    the sepset scope (pass ``subset`` to have the marginalization applied
    to the pieces here instead); ``sepset_q`` the single homogeneous
    approximation.  Infinite when the approximation lacks support the
    cluster uses.
    """
    total = 0.0
    for st, q in cluster_pieces:
        if subset is not None:
            st = marginal_stats(st, subset)
            q = project_homogeneous(st)
        total += stats_inner(st, q)
    total -= stats_inner(sepset_stats, sepset_q)
    return total - ln_z_cluster + ln_z_sepset


def _marginalizer(scope, subset):
    """Aggregation matrix B with B[y, x] = 1 when joint state x projects
    to subset state y."""
    from .model import projection_index
    proj = projection_index(scope, subset)
    b = np.zeros((scope_size(subset), len(proj)))
    b[proj, np.arange(len(proj))] = 1.0
    return b


def _candidate_track(delta, sep):
    """Merge the per-piece step records into one track over the sepset
    interval: times, cumulative marginal residence (K, d) and transitions
    (K, d, d), all over the sepset scope."""
    scope = delta.cluster_stats.scope
    b = _marginalizer(scope, sep.var_scope)
    times = [sep.t1]
    res = [np.zeros(b.shape[0])]
    tr = [np.zeros((b.shape[0], b.shape[0]))]
    for rec in delta.records:
        base_r, base_t = res[-1], tr[-1]
        mr = rec.cum_residence @ b.T
        mt = np.einsum("yx,kxw,zw->kyz", b, rec.cum_transitions, b)
        for k in range(1, len(rec.times)):
            m = mt[k].copy()
            np.fill_diagonal(m, 0.0)
            times.append(rec.times[k])
            res.append(base_r + mr[k])
            tr.append(base_t + m)
    return np.array(times), np.array(res), np.array(tr)


def _projected_inner(res: np.ndarray, tr: np.ndarray) -> np.ndarray:
    """<tau, eta> at the moment-matched projection, in closed form:
    sum over transitions of M ln(M / T[x]) minus the total count.  Accepts
    stacked (K, d) residence and (K, d, d) transition arrays."""
    res = np.asarray(res, float)
    tr = np.asarray(tr, float)
    rate = np.where(res[..., :, None] > 0, tr / np.maximum(res[..., :, None], 1e-300), 0.0)
    return xlogy(tr, rate).sum(axis=(-2, -1)) - tr.sum(axis=(-2, -1))


def best_split_candidate(sep: Sepset, delta, policy: SplitPolicy,
                         graph: ClusterGraph = None):
    """Best-scoring eligible repartition point, or None when fewer than two
    recorded steps (or no eligible candidate) exist.  The returned candidate
    is not threshold-gated; compare ``gain`` against the policy yourself or
    use :func:`choose_split`.

    The scan itself never builds matrices: the inner product of a piece's
    statistics against its own moment-matched projection collapses to a
    closed form, so each recorded boundary costs O(d^2) array work.
    """
    if not delta.records or sum(len(r.times) for r in delta.records) < 3:
        return None
    times, cum_res, cum_tr = _candidate_track(delta, sep)
    total = delta.sepset_stats
    scope = sep.var_scope
    boundaries = np.array(sorted({sep.t1, sep.t2} | {
        d for cid in ((sep.j, sep.k) if graph is not None else ())
        for d in graph.clusters[cid].demarcations()}))
    interior = times[1:-1]
    eligible = np.abs(interior[:, None] - boundaries[None, :]).min(axis=1) \
        >= policy.min_sub_interval
    if not eligible.any():
        return None
    left_res, left_tr = cum_res[1:-1], cum_tr[1:-1]
    right_res = np.maximum(total.residence - left_res, 0.0)
    right_tr = np.maximum(total.transitions - left_tr, 0.0)
    scores = _projected_inner(left_res, left_tr) + _projected_inner(right_res, right_tr)
    scores = np.where(eligible, scores, -np.inf)
    k = int(np.argmax(scores))
    if not np.isfinite(scores[k]):
        return None
    try:
        left = SufficientStats(scope, left_res[k], left_tr[k])
        right = SufficientStats(scope, right_res[k], right_tr[k])
        q_l = project_homogeneous(left)
        q_r = project_homogeneous(right)
    except DegenerateStateError:
        return None
    pieces = [(marginal_stats(st, scope),) for st, _dyn in delta.cluster_dynamics]
    pieces = [(st[0], project_homogeneous(st[0])) for st in pieces]
    cost_one = kl_cost(pieces, delta.ln_z, total, delta.q)
    gain = float(scores[k]) - stats_inner(total, delta.q)
    return SplitCandidate(float(interior[k]), left, right, q_l, q_r,
                          cost_one, cost_one - gain, gain)


def choose_split(sep: Sepset, delta, policy: SplitPolicy,
                 graph: ClusterGraph = None):
    """The argmin-cost repartition point when its gain clears the policy
    threshold, else None."""
    cand = best_split_candidate(sep, delta, policy, graph)
    if cand is not None and cand.gain > policy.threshold:
        return cand
    return None


def execute_split(graph: ClusterGraph, sep: Sepset, cand: SplitCandidate,
                  src: int = None, cfg: RkConfig = None,
                  policy: SplitPolicy = None):
    """Replace ``sep`` by two sepsets split at the candidate point.

    The old stored message is restricted to each half by propagating its
    own homogeneous process to the split point; a demarcation point is
    inserted in both neighboring clusters; then each half's message is
    recomputed from the sending side and incorporated independently
    through the ordinary vertical-send path.  Returns the two new sepsets.
    """
    from .ep import send_vertical
    t_hat = cand.t_hat
    if policy is not None:
        for cid in (sep.j, sep.k):
            if any(abs(d - t_hat) < policy.min_sub_interval
                   for d in graph.clusters[cid].demarcations()):
                return None  # too close to an existing boundary: rejected
    if not sep.t1 + TIME_TOL < t_hat < sep.t2 - TIME_TOL:
        raise ModelValidationError(f"split point {t_hat} outside sepset ({sep.t1}, {sep.t2})")
    src = src if src is not None else sep.j
    dst = sep.other(src)
    del graph.sepsets[sep.id]
    # Each stored half is the old message marginalized to its piece: the
    # old boundary vector propagated to the split point under the old
    # matrix.  Dividing these out cancels the fresh half-messages' interior
    # components exactly when the sender's belief has not moved, so a split
    # changes beliefs only through genuine refinement.
    mu_a_mid, sa = rescaled(expm_action(sep.mu_alpha, sep.mu_q, t_hat - sep.t1))
    mu_b_mid, sb = rescaled(expm_action_T(sep.mu_q, sep.t2 - t_hat, sep.mu_beta))
    left = Sepset(graph.next_sepset_id(), sep.j, sep.k, sep.var_scope, sep.t1, t_hat,
                  mu_alpha=sep.mu_alpha, mu_beta=mu_b_mid,
                  mu_alpha_ls=sep.mu_alpha_ls, mu_beta_ls=sep.mu_beta_ls + sb,
                  mu_q=sep.mu_q)
    graph.add_sepset(left)
    right = Sepset(graph.next_sepset_id(), sep.j, sep.k, sep.var_scope, t_hat, sep.t2,
                   mu_alpha=mu_a_mid, mu_beta=sep.mu_beta,
                   mu_alpha_ls=sep.mu_alpha_ls + sa, mu_beta_ls=sep.mu_beta_ls,
                   mu_q=sep.mu_q)
    graph.add_sepset(right)
    for cid in (sep.j, sep.k):
        insert_demarcation(graph, graph.clusters[cid], t_hat)
    # One full round-trip per half settles the refined messages so the
    # enclosing sweep sees the split as an already-settled local change.
    for new_sep in (left, right):
        send_vertical(graph, src, dst, new_sep, cfg)
    for new_sep in (left, right):
        send_vertical(graph, dst, src, new_sep, cfg)
    for new_sep in (left, right):
        send_vertical(graph, src, dst, new_sep, cfg)
    return left, right
