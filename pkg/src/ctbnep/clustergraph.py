"""Variable-time-scope cluster graphs.

A cluster holds a set of process variables over its own time interval,
broken into sub-intervals at demarcation points (evidence boundaries,
adjoining sepset endpoints, and any refinement splits).  Each sub-interval
caches a forward vector at its start, a dynamics matrix, and a backward
vector at its end; demarcation points store the messages last exchanged
between adjacent sub-intervals.  Sepsets connect clusters over a shared
variable subset and time sub-interval and store the last message passed
through them (single homogeneous process: boundary vectors plus an
intensity matrix; point sepsets carry no matrix).

Legality (checked by :func:`validate`):

* family preservation — every CIM fits in some cluster at every time, and
  every time-0 factor fits in a cluster starting at 0;
* sepset containment/coverage — sepset scopes and intervals sit inside
  both neighbors, and the sepsets of a pair jointly cover the pair's
  interval intersection;
* running intersection — at (almost) every time point, the clusters and
  sepsets containing a given variable form a tree.  The check runs on
  open elementary intervals: overlaps at isolated instants (e.g. a chain
  cut time) are measure-zero seams, and the canonical layouts would
  otherwise be illegal at exactly those instants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FamilyPreservationError, ModelValidationError
from .markov import IntervalProcess, RkConfig, expm_action, expm_action_T, \
    point_posterior as _pp, rescaled
from .model import (CtbnModel, DynamicsMatrix, IntervalEvidence, amalgamate,
                    expand_vector, marginalize_vector, reduce_point, scope_size)

TIME_TOL = 1e-9  # demarcation times closer than this are considered equal


@dataclass
class SubInterval:
    """One homogeneous piece of a cluster's distribution."""

    t1: float
    t2: float
    dynamics: DynamicsMatrix
    alpha: np.ndarray
    beta: np.ndarray
    alpha_ls: float = 0.0
    beta_ls: float = 0.0

    @property
    def span(self) -> float:
        return self.t2 - self.t1

    def process(self) -> IntervalProcess:
        return IntervalProcess(self.alpha, self.dynamics, self.beta,
                               self.t1, self.t2, self.alpha_ls, self.beta_ls)

    def forward_at(self, t: float, cfg=None):
        """Filtered vector at t in [t1, t2], unit-max scaled, with log scale."""
        f = expm_action(self.alpha, self.dynamics, t - self.t1, cfg)
        f, s = rescaled(f)
        return f, self.alpha_ls + s

    def backward_at(self, t: float, cfg=None):
        """Backward vector at t in [t1, t2], unit-max scaled, with log scale."""
        b = expm_action_T(self.dynamics, self.t2 - t, self.beta, cfg)
        b, s = rescaled(b)
        return b, self.beta_ls + s


@dataclass
class DemarcationMessage:
    """Last (alpha, beta) exchanged between two adjacent sub-intervals."""

    alpha: np.ndarray
    beta: np.ndarray
    alpha_ls: float = 0.0
    beta_ls: float = 0.0


@dataclass
class Cluster:
    id: int
    var_scope: tuple
    t1: float
    t2: float
    subs: list = field(default_factory=list)           # of SubInterval
    demarc_msgs: list = field(default_factory=list)    # msg i sits between subs[i] and subs[i+1]
    assigned_cims: list = field(default_factory=list)
    initial_factors: list = field(default_factory=list)
    sequence_id: int = -1
    dirty: bool = False

    @property
    def dim(self) -> int:
        return scope_size(self.var_scope)

    def demarcations(self) -> list:
        return [self.subs[0].t1, *(s.t2 for s in self.subs)] if self.subs else [self.t1, self.t2]

    def sub_covering(self, t: float) -> SubInterval:
        for s in self.subs:
            if s.t1 - TIME_TOL <= t <= s.t2 + TIME_TOL:
                return s
        raise ModelValidationError(f"time {t} outside cluster {self.id} [{self.t1}, {self.t2}]")

    def subs_within(self, a: float, b: float) -> list:
        """Sub-intervals covering [a, b] (whose span intersects it)."""
        return [s for s in self.subs if s.t1 >= a - TIME_TOL and s.t2 <= b + TIME_TOL
                and s.t2 - s.t1 > TIME_TOL]

    def point_posterior(self, t: float, cfg=None):
        """Normalized in-cluster distribution at t plus ln Z.  Assumes the
        cluster is internally calibrated (run update_dist first)."""
        return _pp(self.sub_covering(t).process(), t, cfg)

    def marginal(self, subset, t: float, cfg=None) -> np.ndarray:
        dist, _ = self.point_posterior(t, cfg)
        return marginalize_vector(dist, self.var_scope, subset)


@dataclass
class Sepset:
    """Connection between clusters ``j`` and ``k`` over a shared variable
    subset and time sub-interval.  ``t1 == t2`` marks a point sepset
    (between consecutive same-scope clusters), which stores no matrix."""

    id: int
    j: int
    k: int
    var_scope: tuple
    t1: float
    t2: float
    mu_alpha: np.ndarray = None
    mu_beta: np.ndarray = None
    mu_alpha_ls: float = 0.0
    mu_beta_ls: float = 0.0
    mu_q: object = None  # IntensityMatrix over var_scope; None for point sepsets

    @property
    def is_point(self) -> bool:
        return self.t2 - self.t1 <= TIME_TOL

    @property
    def dim(self) -> int:
        return scope_size(self.var_scope)

    def other(self, cluster_id: int) -> int:
        return self.k if cluster_id == self.j else self.j

    def reset_message(self):
        n = self.dim
        self.mu_alpha = np.ones(n)
        self.mu_beta = np.ones(n)
        self.mu_alpha_ls = 0.0
        self.mu_beta_ls = 0.0
        self.mu_q = None if self.is_point else \
            DynamicsMatrix(self.var_scope, np.zeros((n, n)))


@dataclass
class Violation:
    kind: str      # family_preservation | sepset_containment | sepset_coverage | running_intersection
    message: str

    def __repr__(self):
        return f"Violation({self.kind}: {self.message})"


@dataclass
class ClusterGraph:
    model: CtbnModel
    horizon: float
    clusters: dict = field(default_factory=dict)   # id -> Cluster
    sepsets: dict = field(default_factory=dict)    # id -> Sepset
    sequences: list = field(default_factory=list)  # of (scope tuple, [cluster ids])
    evidence: IntervalEvidence = None

    def sepsets_of(self, cluster_id: int) -> list:
        return [s for s in self.sepsets.values() if cluster_id in (s.j, s.k)]

    def add_cluster(self, c: Cluster):
        self.clusters[c.id] = c

    def add_sepset(self, s: Sepset):
        self.sepsets[s.id] = s

    def next_sepset_id(self) -> int:
        return max(self.sepsets, default=-1) + 1

    def cluster_for(self, var, t: float) -> Cluster:
        """Smallest-scope cluster containing the variable at time t."""
        best = None
        for c in self.clusters.values():
            if var in c.var_scope and c.t1 - TIME_TOL <= t <= c.t2 + TIME_TOL:
                if best is None or (len(c.var_scope), c.id) < (len(best.var_scope), best.id):
                    best = c
        if best is None:
            raise ModelValidationError(f"no cluster contains {var.name!r} at t={t}")
        return best


def _canonical(model: CtbnModel, subset) -> tuple:
    return tuple(v for v in model.variables if v in set(subset))


def build_uniform_graph(model: CtbnModel, partition, segmentation,
                        horizon: float) -> ClusterGraph:
    """Cluster graph with one same-scope cluster sequence per partition
    subset, cut at the given times.

    Consecutive clusters of a sequence meet at point sepsets; sequences
    with overlapping variable scopes are joined by one vertical sepset per
    overlapping cluster pair, spanning exactly the pair's interval
    intersection (so each sepset lies within a single cluster interval on
    both sides).  Raises when some CIM family fits in no subset.
    """
    partition = [_canonical(model, s) for s in partition]
    segmentation = [sorted(c) for c in segmentation]
    if len(segmentation) != len(partition):
        raise ModelValidationError("need one cut list per partition subset")
    for v in model.variables:
        fam = set(model.family(v))
        if not any(fam <= set(s) for s in partition):
            raise FamilyPreservationError(
                f"CIM for {v.name!r} (family {sorted(x.name for x in fam)}) "
                "fits in no partition subset"
            )
    g = ClusterGraph(model, float(horizon))
    cid = 0
    for si, (scope, cuts) in enumerate(zip(partition, segmentation)):
        for t in cuts:
            if not 0.0 < t < horizon:
                raise ModelValidationError(f"cut {t} outside (0, {horizon})")
        bounds = [0.0, *cuts, float(horizon)]
        ids = []
        for a, b in zip(bounds, bounds[1:]):
            g.add_cluster(Cluster(cid, scope, a, b, sequence_id=si))
            ids.append(cid)
            cid += 1
        g.sequences.append((scope, ids))
    sid = 0
    for si, (scope_i, ids_i) in enumerate(g.sequences):
        for a, b in zip(ids_i, ids_i[1:]):  # point sepsets along the sequence
            t = g.clusters[a].t2
            g.add_sepset(Sepset(sid, a, b, scope_i, t, t))
            sid += 1
        for sj in range(si + 1, len(g.sequences)):
            scope_j, ids_j = g.sequences[sj]
            shared = _canonical(model, set(scope_i) & set(scope_j))
            if not shared:
                continue
            for a in ids_i:
                for b in ids_j:
                    lo = max(g.clusters[a].t1, g.clusters[b].t1)
                    hi = min(g.clusters[a].t2, g.clusters[b].t2)
                    if hi - lo > TIME_TOL:
                        g.add_sepset(Sepset(sid, a, b, shared, lo, hi))
                        sid += 1
    return g


def _merge_cover(intervals, lo: float, hi: float) -> bool:
    """Whether the union of closed intervals covers [lo, hi]."""
    spans = sorted((a, b) for a, b in intervals)
    reach = lo
    for a, b in spans:
        if a > reach + TIME_TOL:
            return False
        reach = max(reach, b)
    return reach >= hi - TIME_TOL


def validate(graph: ClusterGraph) -> list:
    """All legality violations of the graph (empty list when legal)."""
    out = []
    model = graph.model
    T = graph.horizon
    # family preservation
    for v in model.variables:
        fam = set(model.family(v))
        covering = [(c.t1, c.t2) for c in graph.clusters.values()
                    if fam <= set(c.var_scope)]
        if not _merge_cover(covering, 0.0, T):
            out.append(Violation(
                "family_preservation",
                f"CIM for {v.name!r} is not covered by any cluster at every t in [0, {T}]",
            ))
    for f in model.initial.factors:
        ok = any(set(f.scope) <= set(c.var_scope) and abs(c.t1) <= TIME_TOL
                 for c in graph.clusters.values())
        if not ok:
            out.append(Violation(
                "family_preservation",
                f"initial factor for {f.variable.name!r} fits in no cluster starting at 0",
            ))
    # sepset containment + coverage
    pairs: dict = {}
    for s in graph.sepsets.values():
        cj, ck = graph.clusters[s.j], graph.clusters[s.k]
        if not set(s.var_scope) <= (set(cj.var_scope) & set(ck.var_scope)):
            out.append(Violation(
                "sepset_containment",
                f"sepset {s.id} scope exceeds the scope intersection of "
                f"clusters {s.j} and {s.k}",
            ))
        lo, hi = max(cj.t1, ck.t1), min(cj.t2, ck.t2)
        if s.t1 < lo - TIME_TOL or s.t2 > hi + TIME_TOL:
            out.append(Violation(
                "sepset_containment",
                f"sepset {s.id} interval [{s.t1}, {s.t2}] exceeds the interval "
                f"intersection [{lo}, {hi}] of clusters {s.j} and {s.k}",
            ))
        pairs.setdefault(frozenset((s.j, s.k)), []).append(s)
    for pair, seps in pairs.items():
        j, k = sorted(pair)
        cj, ck = graph.clusters[j], graph.clusters[k]
        lo, hi = max(cj.t1, ck.t1), min(cj.t2, ck.t2)
        if hi - lo > TIME_TOL and not _merge_cover(
                [(s.t1, s.t2) for s in seps], lo, hi):
            out.append(Violation(
                "sepset_coverage",
                f"sepsets between clusters {j} and {k} do not cover their "
                f"interval intersection [{lo}, {hi}]",
            ))
    # running intersection, checked on open elementary intervals
    for v in model.variables:
        nodes = [("c", c.id, c.t1, c.t2) for c in graph.clusters.values()
                 if v in c.var_scope]
        nodes += [("s", s.id, s.t1, s.t2) for s in graph.sepsets.values()
                  if v in s.var_scope]
        events = sorted({t for _, _, a, b in nodes for t in (a, b)})
        for a, b in zip(events, events[1:]):
            if b - a <= TIME_TOL:
                continue
            mid = 0.5 * (a + b)
            active = [(kind, nid) for kind, nid, t1, t2 in nodes if t1 < mid < t2]
            act = set(active)
            if len(act) <= 1:
                continue
            edges = []
            for kind, nid in active:
                if kind != "s":
                    continue
                s = graph.sepsets[nid]
                for side in (s.j, s.k):
                    if ("c", side) in act:
                        edges.append((("s", nid), ("c", side)))
            adj: dict = {n: [] for n in act}
            for x, y in edges:
                adj[x].append(y)
                adj[y].append(x)
            seen = set()
            stack = [next(iter(act))]
            while stack:
                n = stack.pop()
                if n in seen:
                    continue
                seen.add(n)
                stack.extend(adj[n])
            if len(seen) < len(act) or len(edges) != len(act) - 1:
                why = "disconnected" if len(seen) < len(act) else "cyclic"
                out.append(Violation(
                    "running_intersection",
                    f"clusters/sepsets containing {v.name!r} on ({a:.6g}, {b:.6g}) "
                    f"form a {why} graph, not a tree",
                ))
                break
    return out


def _reduced_dynamics(base: DynamicsMatrix, evidence: IntervalEvidence,
                      scope, a: float, b: float) -> DynamicsMatrix:
    from .model import reduce_matrix
    active = evidence.active(0.5 * (a + b), scope)
    return reduce_matrix(base, active)


def initialize(graph: ClusterGraph, model: CtbnModel = None,
               evidence: IntervalEvidence = None) -> ClusterGraph:
    """Populate the graph caches for message passing.

    All point vectors start at 1 and all dynamics accumulators at the
    evidence-reduced amalgamation of the CIMs assigned to the cluster.
    Each CIM goes to exactly one cluster sequence covering its family
    (smallest variable scope, then lowest first cluster id); time-0
    factors multiply into the starting forward vector of the smallest
    eligible cluster.  Demarcation points are inserted at evidence
    boundaries and adjoining sepset endpoints, and boundary vectors at
    evidence edges are reduced to match the evidence.
    """
    model = model or graph.model
    evidence = evidence if evidence is not None else IntervalEvidence(())
    graph.evidence = evidence

    assigned: dict = {seq_id: [] for seq_id in range(len(graph.sequences))}
    for v in model.variables:
        fam = set(model.family(v))
        cands = [(len(scope), ids[0], si) for si, (scope, ids) in enumerate(graph.sequences)
                 if fam <= set(scope)]
        if not cands:
            raise FamilyPreservationError(
                f"CIM for {v.name!r} cannot be assigned to any cluster sequence"
            )
        assigned[min(cands)[2]].append(model.cims[v])

    factor_home: dict = {}
    for f in model.initial.factors:
        cands = [(len(c.var_scope), c.id) for c in graph.clusters.values()
                 if abs(c.t1) <= TIME_TOL and set(f.scope) <= set(c.var_scope)]
        if not cands:
            raise FamilyPreservationError(
                f"initial factor for {f.variable.name!r} fits in no time-0 cluster"
            )
        factor_home.setdefault(min(cands)[1], []).append(f)

    for c in graph.clusters.values():
        c.assigned_cims = list(assigned.get(c.sequence_id, []))
        c.initial_factors = list(factor_home.get(c.id, []))
        base = amalgamate([cim.as_joint() for cim in c.assigned_cims],
                          scope=c.var_scope)
        cuts = {c.t1, c.t2}
        for s in graph.sepsets_of(c.id):
            cuts |= {s.t1, s.t2}
        cuts |= set(evidence.boundaries(scope=c.var_scope, lo=c.t1, hi=c.t2))
        times = _dedupe(sorted(cuts), c.t1, c.t2)
        n = c.dim
        c.subs = []
        c.demarc_msgs = []
        for a, b in zip(times, times[1:]):
            dyn = _reduced_dynamics(base, evidence, c.var_scope, a, b)
            alpha = reduce_point(np.ones(n), c.var_scope,
                                 evidence.starting_at(a, c.var_scope))
            beta = reduce_point(np.ones(n), c.var_scope,
                                evidence.ending_at(b, c.var_scope))
            c.subs.append(SubInterval(a, b, dyn, alpha, beta))
        for s in c.subs[1:]:
            c.demarc_msgs.append(DemarcationMessage(np.ones(n), np.ones(n)))
        for f in c.initial_factors:
            c.subs[0].alpha = c.subs[0].alpha * expand_vector(
                f.as_vector(), f.scope, c.var_scope)
        c.subs[0].alpha, c.subs[0].alpha_ls = rescaled(c.subs[0].alpha)
        c.dirty = True
    for s in graph.sepsets.values():
        s.reset_message()
    return graph


def _dedupe(times, lo, hi):
    out = [lo]
    for t in times:
        if t - out[-1] > TIME_TOL and t < hi - TIME_TOL:
            out.append(t)
    out.append(hi)
    return out


def insert_demarcation(graph: ClusterGraph, cluster: Cluster, t: float) -> Cluster:
    """Split the sub-interval containing ``t`` in two.

    Both halves keep the parent dynamics matrix; the new boundary vectors
    are obtained by propagating the parent's endpoints, and the new
    demarcation message is seeded with exactly those propagated vectors,
    so point posteriors anywhere in the cluster are unchanged.  A time
    within tolerance of an existing demarcation point merges (no-op).
    """
    for d in cluster.demarcations():
        if abs(d - t) <= TIME_TOL:
            return cluster
    if not cluster.t1 < t < cluster.t2:
        raise ModelValidationError(
            f"demarcation {t} outside cluster {cluster.id} ({cluster.t1}, {cluster.t2})"
        )
    for i, s in enumerate(cluster.subs):
        if s.t1 < t < s.t2:
            f, f_ls = s.forward_at(t)
            b, b_ls = s.backward_at(t)
            left = SubInterval(s.t1, t, s.dynamics, s.alpha, b, s.alpha_ls, b_ls)
            right = SubInterval(t, s.t2, s.dynamics, f, s.beta, f_ls, s.beta_ls)
            cluster.subs[i:i + 1] = [left, right]
            cluster.demarc_msgs.insert(i, DemarcationMessage(f, b, f_ls, b_ls))
            return cluster
    raise ModelValidationError(f"no sub-interval of cluster {cluster.id} contains {t}")
