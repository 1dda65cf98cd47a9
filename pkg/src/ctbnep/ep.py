"""Expectation-propagation engine: vertical and horizontal message passing
over a cluster graph, nested in-cluster calibration, damped intensity
updates, and convergence detection.

Message semantics
-----------------
A vertical message over a sepset (scope V', interval [t1, t2]) is a single
homogeneous Markov process: a point distribution at t1 (the sender's
filtered marginal), an intensity matrix (the moment-matching projection of
the sender's expected sufficient statistics over the interval,
marginalized to V'), and a backward likelihood at t2 (the sender's
backward vector marginalized with filtered weights).  Incorporation
multiplies the boundary factors — as a ratio against the previously stored
message — into the receiving cluster's caches on *both* sides of each
boundary point, adds the damped intensity increment to every covered
sub-interval, and leaves interior sub-interval boundaries to the nested
calibration sweep (Update-Dist), whose multiply/divide bookkeeping then
spreads the new information without double counting.

Horizontal messages connect consecutive same-scope clusters at their
shared time point: the earlier cluster forwards its filtered end vector,
the later one returns its backward start vector.  Point messages are never
damped; only intensity increments need the validity damping.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .clustergraph import Cluster, ClusterGraph, Sepset, TIME_TOL
from .errors import ZeroSupportError
from .markov import RkConfig, expected_stats, project_homogeneous, rescaled
from .model import (DynamicsMatrix, IntensityMatrix, expand_vector,
                    marginal_stats, marginalize_vector, reduce_matrix)

TINY = 1e-300  # division threshold below which support is considered lost


def safe_ratio(num: np.ndarray, num_ls: float, den: np.ndarray, den_ls: float):
    """Entrywise num/den with log scales; entries where both sides have lost
    support come out 0, a positive numerator over a dead denominator is a
    zero-support error."""
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    dead = den <= TINY
    if np.any(dead & (num > TINY)):
        raise ZeroSupportError(
            "message division by a zero entry that still carries probability"
        )
    out = np.where(dead, 0.0, num / np.where(dead, 1.0, den))
    out, s = rescaled(out)
    return out, num_ls - den_ls + s


def _multiply_slot(vec: np.ndarray, vec_ls: float, factor: np.ndarray, f_ls: float):
    out, s = rescaled(vec * factor)
    return out, vec_ls + f_ls + s


def largest_valid_lambda(current: DynamicsMatrix, increment: np.ndarray) -> float:
    """Largest damping factor in [0, 1] keeping all off-diagonal entries of
    current + lambda * increment nonnegative (closed form)."""
    cur = current.entries
    inc = np.asarray(increment, float)
    off = ~np.eye(cur.shape[0], dtype=bool)
    neg = off & (inc < 0)
    if not neg.any():
        return 1.0
    lam = np.min(-cur[neg] / inc[neg])
    return float(min(max(lam, 0.0), 1.0))


@dataclass
class VerticalDelta:
    """An outgoing vertical message plus the cluster-side byproducts the
    split search needs."""

    alpha: np.ndarray
    alpha_ls: float
    beta: np.ndarray
    beta_ls: float
    q: IntensityMatrix
    sepset_stats: object          # marginalized SufficientStats over the sepset scope
    cluster_stats: object         # summed SufficientStats over the sender scope
    cluster_dynamics: list        # [(SufficientStats, DynamicsMatrix)] per piece
    ln_z: float
    records: list                 # per-sub StepRecord when recording, else []


def update_dist(graph: ClusterGraph, cluster: Cluster, cfg: RkConfig = None) -> Cluster:
    """Calibrate the nested chain of sub-intervals: one forward sweep of
    propagated start vectors and one backward sweep of propagated end
    vectors, each incorporated by multiply/divide against the stored
    demarcation message.  Idempotent once calibrated."""
    subs = cluster.subs
    for i in range(1, len(subs)):
        msg = cluster.demarc_msgs[i - 1]
        delta, d_ls = subs[i - 1].forward_at(subs[i].t1, cfg)
        ratio, r_ls = safe_ratio(delta, d_ls, msg.alpha, msg.alpha_ls)
        subs[i].alpha, subs[i].alpha_ls = _multiply_slot(
            subs[i].alpha, subs[i].alpha_ls, ratio, r_ls)
        msg.alpha, msg.alpha_ls = delta, d_ls
    for i in range(len(subs) - 2, -1, -1):
        msg = cluster.demarc_msgs[i]
        delta, d_ls = subs[i + 1].backward_at(subs[i + 1].t1, cfg)
        ratio, r_ls = safe_ratio(delta, d_ls, msg.beta, msg.beta_ls)
        subs[i].beta, subs[i].beta_ls = _multiply_slot(
            subs[i].beta, subs[i].beta_ls, ratio, r_ls)
        msg.beta, msg.beta_ls = delta, d_ls
    cluster.dirty = False
    return cluster


def _ensure_calibrated(graph: ClusterGraph, cluster: Cluster, cfg=None):
    if cluster.dirty:
        update_dist(graph, cluster, cfg)


def _cached_stats(s, run_cfg: RkConfig):
    """Memoized expected_stats per sub-interval: once messages settle,
    repeat sends would re-integrate bit-identical inputs.  A recorded
    result also serves unrecorded requests (it carries strictly more)."""
    key = (s.alpha.tobytes(), s.alpha_ls, s.beta.tobytes(), s.beta_ls,
           s.dynamics.entries.tobytes(), run_cfg.rel_tol, run_cfg.abs_tol)
    cached = getattr(s, "_stats_cache", None)
    if cached is not None and cached[0] == key and \
            (not run_cfg.record_steps or cached[1][2] is not None):
        return cached[1]
    out = expected_stats(s.process(), run_cfg)
    if cached is None or cached[0] != key or out[2] is not None:
        s._stats_cache = (key, out)
    return out


def compute_vertical_delta(graph: ClusterGraph, j: int, sep: Sepset,
                           cfg: RkConfig = None, record: bool = False) -> VerticalDelta:
    """The projected message cluster ``j`` sends over ``sep``."""
    cj = graph.clusters[j]
    _ensure_calibrated(graph, cj, cfg)
    pieces = cj.subs_within(sep.t1, sep.t2)
    if not pieces:
        raise ValueError(f"cluster {j} has no sub-intervals covering sepset {sep.id}")
    base = cfg or RkConfig()
    run_cfg = RkConfig(rel_tol=base.rel_tol, abs_tol=base.abs_tol,
                       min_step=base.min_step, max_step=base.max_step,
                       record_steps=record)
    total = None
    ln_z = None
    records = []
    dynamics = []
    for s in pieces:
        st, lnz, rec = _cached_stats(s, run_cfg)
        total = st if total is None else total + st
        ln_z = lnz if ln_z is None else ln_z  # calibrated pieces share one Z
        dynamics.append((st, s.dynamics))
        if rec is not None:
            records.append(rec)
    marg = marginal_stats(total, sep.var_scope)
    q_delta = project_homogeneous(marg)
    start = pieces[0]
    d_alpha = marginalize_vector(start.alpha, cj.var_scope, sep.var_scope)
    mass = d_alpha.sum()
    d_alpha = d_alpha / mass
    d_alpha_ls = start.alpha_ls + float(np.log(mass))
    end = pieces[-1]
    f_end, f_ls = end.forward_at(sep.t2, cfg)
    num = marginalize_vector(f_end * end.beta, cj.var_scope, sep.var_scope)
    den = marginalize_vector(f_end, cj.var_scope, sep.var_scope)
    flat = marginalize_vector(end.beta, cj.var_scope, sep.var_scope)
    counts = marginalize_vector(np.ones(cj.dim), cj.var_scope, sep.var_scope)
    d_beta = np.where(den > TINY, num / np.where(den > TINY, den, 1.0), flat / counts)
    d_beta, s = rescaled(d_beta)
    d_beta_ls = end.beta_ls + s
    return VerticalDelta(d_alpha, d_alpha_ls, d_beta, d_beta_ls, q_delta,
                         marg, total, dynamics, ln_z, records)


def _apply_start_factor(cluster: Cluster, t: float, ratio: np.ndarray):
    """Multiply a point factor (expanded to the cluster scope) into the
    forward slot of the sub-interval starting at t.  Message boundary
    factors face inward only: on a legal graph, information for times
    outside the sepset interval arrives through the adjacent sepsets that
    the coverage property guarantees."""
    for s in cluster.subs:
        if abs(s.t1 - t) <= TIME_TOL:
            s.alpha, s.alpha_ls = _multiply_slot(s.alpha, s.alpha_ls, ratio, 0.0)
            return
    raise ValueError(f"no sub-interval of cluster {cluster.id} starts at {t}")


def _apply_end_factor(cluster: Cluster, t: float, ratio: np.ndarray):
    """Inward-facing counterpart of :func:`_apply_start_factor` for the
    backward slot of the sub-interval ending at t."""
    for s in cluster.subs:
        if abs(s.t2 - t) <= TIME_TOL:
            s.beta, s.beta_ls = _multiply_slot(s.beta, s.beta_ls, ratio, 0.0)
            return
    raise ValueError(f"no sub-interval of cluster {cluster.id} ends at {t}")


def _has_horizontal_at(graph: ClusterGraph, cluster_id: int, t: float) -> bool:
    return any(s.is_point and cluster_id in (s.j, s.k) and abs(s.t1 - t) <= TIME_TOL
               for s in graph.sepsets.values())


def incorporate_vertical(graph: ClusterGraph, k: int, sep: Sepset,
                         delta: VerticalDelta) -> float:
    """Fold a vertical message into cluster ``k``: boundary-factor ratios
    against the stored message, and the damped intensity increment on
    every covered sub-interval.  Returns (damping factor used, max-norm
    movement of the incorporated message components).

    Boundary point factors apply only at a *terminal* slot — a receiver
    endpoint with no same-scope neighbor at that instant.  Everywhere else
    the point information already travels through the horizontal chain and
    the intensity increments, and re-applying it at shared boundaries
    would double-count it (each sepset boundary on a legal graph is either
    an interior tiling point of the pair's sepsets or a cluster endpoint,
    so skipped factors are always delivered by an adjacent route).
    """
    ck = graph.clusters[k]
    scope = ck.var_scope
    move = float(np.abs(delta.q.entries - sep.mu_q.entries).max())
    # Point factors act modulo normalization; carrying their log scales
    # would circulate and compound around every cluster loop.
    if abs(sep.t1 - ck.t1) <= TIME_TOL and not _has_horizontal_at(graph, k, sep.t1):
        ratio_a, _ = safe_ratio(delta.alpha, 0.0, sep.mu_alpha, 0.0)
        _apply_start_factor(ck, sep.t1, expand_vector(ratio_a, sep.var_scope, scope))
        move = max(move, float(np.abs(delta.alpha - sep.mu_alpha).max()))
    if abs(sep.t2 - ck.t2) <= TIME_TOL and not _has_horizontal_at(graph, k, sep.t2):
        ratio_b, _ = safe_ratio(delta.beta, 0.0, sep.mu_beta, 0.0)
        _apply_end_factor(ck, sep.t2, expand_vector(ratio_b, sep.var_scope, scope))
        move = max(move, float(np.abs(delta.beta - sep.mu_beta).max()))
    inc = delta.q.expand(scope) - sep.mu_q.expand(scope)
    covered = ck.subs_within(sep.t1, sep.t2)
    evidence = graph.evidence
    incs = []
    lam = 1.0
    for s in covered:
        local = inc
        if evidence is not None:
            active = evidence.active(0.5 * (s.t1 + s.t2), scope)
            if active:  # keep evidence-dead rows/cols out of the update
                local = _reduce_entries(inc, scope, active)
        incs.append(local)
        lam = min(lam, largest_valid_lambda(s.dynamics, local))
    for s, local in zip(covered, incs):
        ent = s.dynamics.entries + lam * local
        off = ~np.eye(ent.shape[0], dtype=bool)
        low = ent[off].min() if off.any() else 0.0
        if low < -1e-12:
            raise ZeroSupportError(f"damped update left off-diagonal {low:.3e} negative")
        ent[off] = np.maximum(ent[off], 0.0)
        s.dynamics = DynamicsMatrix(s.dynamics.scope, ent)
    ck.dirty = True
    return lam, move


def _reduce_entries(entries: np.ndarray, scope, evidence: dict) -> np.ndarray:
    from .model import consistency_mask
    mask = consistency_mask(scope, evidence)
    out = entries.copy()
    out[~mask, :] = 0.0
    out[:, ~mask] = 0.0
    return out


def send_vertical(graph: ClusterGraph, j: int, k: int, sep: Sepset,
                  cfg: RkConfig = None, record: bool = False):
    """Full vertical exchange j -> k: compute the projection, measure how
    far it moved, incorporate it, and store it on the sepset.

    Returns (message delta in max norm, damping factor, VerticalDelta).
    """
    delta = compute_vertical_delta(graph, j, sep, cfg, record)
    lam, move = incorporate_vertical(graph, k, sep, delta)
    sep.mu_alpha, sep.mu_alpha_ls = delta.alpha, delta.alpha_ls
    sep.mu_beta, sep.mu_beta_ls = delta.beta, delta.beta_ls
    sep.mu_q = delta.q
    return move, lam, delta


def send_horizontal(graph: ClusterGraph, i: int, j: int, sep: Sepset,
                    cfg: RkConfig = None) -> float:
    """Point-sepset exchange between same-scope clusters meeting at one
    time: the earlier cluster forwards its filtered end vector into the
    later cluster's start slot, or the later returns its backward start
    vector into the earlier's end slot.  Never damped."""
    ci, cj = graph.clusters[i], graph.clusters[j]
    if set(ci.var_scope) != set(cj.var_scope):
        raise ValueError("horizontal messages need identical variable scopes")
    _ensure_calibrated(graph, ci, cfg)
    t = sep.t1
    if abs(ci.t2 - t) <= TIME_TOL and abs(cj.t1 - t) <= TIME_TOL:
        delta, d_ls = ci.subs[-1].forward_at(t, cfg)
        mass = delta.sum()
        delta, d_ls = delta / mass, d_ls + float(np.log(mass))
        move = float(np.abs(delta - sep.mu_alpha).max())
        ratio, _ = safe_ratio(delta, 0.0, sep.mu_alpha, 0.0)
        sub = cj.subs[0]
        sub.alpha, sub.alpha_ls = _multiply_slot(
            sub.alpha, sub.alpha_ls, expand_vector(ratio, sep.var_scope, cj.var_scope), 0.0)
        sep.mu_alpha, sep.mu_alpha_ls = delta, d_ls
    elif abs(ci.t1 - t) <= TIME_TOL and abs(cj.t2 - t) <= TIME_TOL:
        delta, d_ls = ci.subs[0].backward_at(t, cfg)
        move = float(np.abs(delta - sep.mu_beta).max())
        ratio, _ = safe_ratio(delta, 0.0, sep.mu_beta, 0.0)
        sub = cj.subs[-1]
        sub.beta, sub.beta_ls = _multiply_slot(
            sub.beta, sub.beta_ls, expand_vector(ratio, sep.var_scope, cj.var_scope), 0.0)
        sep.mu_beta, sep.mu_beta_ls = delta, d_ls
    else:
        raise ValueError(f"clusters {i} and {j} do not touch at {t}")
    cj.dirty = True
    return move


@dataclass
class Schedule:
    """Sweep plan: convergence tolerance on message parameters (max norm),
    sweep cap, and whether intensity increments are damped to validity."""

    tol: float = 1e-6
    max_sweeps: int = 50
    damping: bool = True
    rk: RkConfig = field(default_factory=RkConfig)


@dataclass
class EpDiagnostics:
    converged: bool = False
    sweeps: int = 0
    runtime: float = 0.0
    rows: list = field(default_factory=list)   # (sweep, sepset id, delta, lambda, cum seconds)
    split_rows: list = field(default_factory=list)  # (sweep, sepset id, t_hat, cost1, cost2, accepted)

    def max_delta(self, sweep: int) -> float:
        ds = [r[2] for r in self.rows if r[0] == sweep]
        return max(ds) if ds else 0.0

    def write_rows(self, path):
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep", "sepset", "delta", "lambda", "cum_seconds"])
            for sweep, sid, d, lam, tcum in self.rows:
                w.writerow([sweep, sid, f"{d:.12g}", f"{lam:.12g}", f"{tcum:.6f}"])


def _sweep_order(graph: ClusterGraph):
    return sorted(graph.sepsets.values(), key=lambda s: (s.t1, s.t2, s.id))


def _message_sweep(graph: ClusterGraph, schedule: Schedule, diag: EpDiagnostics,
                   sweep: int, t0: float, split_policy=None,
                   record_forward: bool = False):
    """One full sweep: a time-forward phase and the reverse phase, each
    visiting every sepset once (verticals exchange one direction per
    phase, horizontals one direction per phase).

    ``record_forward`` makes the forward-phase vertical sends record their
    integrator steps.  When a split policy is supplied, a forward vertical
    send whose own movement is already below the evaluation gate (its
    message has stabilized) is immediately evaluated for repartitioning
    and split up to the policy's per-sweep cap; newly created halves are
    not revisited until the next sweep.  Returns (worst message movement,
    number of accepted splits, whether every vertical sepset reached
    evaluation).
    """
    if split_policy is not None:
        from .split import best_split_candidate, execute_split
        record_forward = True
        gate = max(schedule.tol, 0.1 * split_policy.threshold)
    worst = 0.0
    n_accepted = 0
    all_evaluated = True
    order = _sweep_order(graph)
    for phase_fwd in (True, False):
        phase = order if phase_fwd else list(reversed(order))
        for sep in phase:
            if sep.id not in graph.sepsets:  # replaced by a split this sweep
                continue
            ci = graph.clusters[sep.j]
            if sep.is_point:
                if abs(ci.t2 - sep.t1) <= TIME_TOL:
                    earlier, later = sep.j, sep.k
                else:
                    earlier, later = sep.k, sep.j
                src, dst = (earlier, later) if phase_fwd else (later, earlier)
                d = send_horizontal(graph, src, dst, sep, schedule.rk)
                worst = max(worst, d)
                diag.rows.append((sweep, sep.id, d, 1.0, time.perf_counter() - t0))
                continue
            lo, hi = min(sep.j, sep.k), max(sep.j, sep.k)
            src, dst = (lo, hi) if phase_fwd else (hi, lo)
            d, lam, delta = send_vertical(graph, src, dst, sep, schedule.rk,
                                          record=record_forward and phase_fwd)
            worst = max(worst, d)
            diag.rows.append((sweep, sep.id, d, lam, time.perf_counter() - t0))
            if split_policy is None or not phase_fwd:
                continue
            if d >= gate:  # still moving: decisions would ride on churn
                all_evaluated = False
                continue
            budget = split_policy.max_splits_per_sepset_per_sweep
            target = sep
            while budget > 0:
                cand = best_split_candidate(target, delta, split_policy, graph)
                if cand is None:
                    break
                accepted = cand.gain > split_policy.threshold
                if accepted:
                    halves = execute_split(graph, target, cand, src=src,
                                           cfg=schedule.rk, policy=split_policy)
                    accepted = halves is not None
                diag.split_rows.append((sweep, target.id, cand.t_hat,
                                        cand.cost_one, cand.cost_two, accepted))
                if not accepted:
                    break
                n_accepted += 1
                budget -= 1
                if budget > 0:
                    # re-evaluate the more promising half with a fresh record
                    target = max(halves, key=lambda h: h.t2 - h.t1)
                    _, _, delta = send_vertical(graph, src, dst, target,
                                                schedule.rk, record=True)
                else:
                    break
    return worst, n_accepted, all_evaluated


def run_ep(graph: ClusterGraph, schedule: Schedule = None, split_policy=None):
    """Iterate message passing until messages stop moving.

    Without a split policy this is plain fixed-granularity EP: sweeps run
    until the largest change in any incorporated message parameter drops
    below the schedule tolerance (non-convergence at the sweep cap is
    reported in the diagnostics, not raised).

    With a split policy, sweeps run to convergence first; the following
    sweep records its forward vertical sends and evaluates each sepset for
    repartitioning, splitting where the two-piece projection clears the
    threshold.  Accepted splits restart the convergence loop; a settled
    sweep that accepts no split ends the run.  Evaluating splits only on
    settled messages keeps the decisions deterministic and stops transient
    message churn from manufacturing phantom splits.
    """
    schedule = schedule or Schedule()
    diag = EpDiagnostics()
    t0 = time.perf_counter()
    # Split evaluation waits until messages have settled well below the
    # decision scale, so transient churn cannot manufacture phantom gains.
    eval_gate = schedule.tol if split_policy is None else \
        max(schedule.tol, 0.1 * split_policy.threshold)
    settled = False
    for sweep in range(1, schedule.max_sweeps + 1):
        evaluate = split_policy is not None and settled
        worst, n_accepted = _message_sweep(
            graph, schedule, diag, sweep, t0,
            split_policy=split_policy if evaluate else None)
        diag.sweeps = sweep
        if worst < schedule.tol and (split_policy is None
                                     or (evaluate and n_accepted == 0)):
            diag.converged = True
            break
        settled = worst < eval_gate
    for c in graph.clusters.values():
        _ensure_calibrated(graph, c, schedule.rk)
    diag.runtime = time.perf_counter() - t0
    return graph, diag
