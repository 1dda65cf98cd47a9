"""Core CTBN representation: variables, intensity matrices, and the
amalgamation/reduction algebra on dynamics matrices.

Joint-state indexing convention
-------------------------------
Every multi-variable object orders its joint states row-major over its
ordered variable scope, with the *last* variable changing fastest.  For a
scope ``(A, B)`` with cardinalities ``(2, 3)`` the states are enumerated
``(a0,b0), (a0,b1), (a0,b2), (a1,b0), ...`` and the flat index of ``(a, b)``
is ``a * 3 + b``.  This matches ``numpy.ravel_multi_index`` with C order
and is relied on by every matrix operation in the package.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelValidationError, ScopeCollisionError, ZeroProbabilityError

DIAG_RTOL = 1e-12  # relative tolerance for the intensity-matrix row-sum check


@dataclass(frozen=True)
class Variable:
    """A discrete process variable with a fixed number of states."""

    name: str
    cardinality: int

    def __post_init__(self):
        if self.cardinality < 2:
            raise ModelValidationError(
                f"variable {self.name!r} needs cardinality >= 2, got {self.cardinality}"
            )

    def __repr__(self):
        return f"Variable({self.name!r}, {self.cardinality})"


def scope_size(scope) -> int:
    """Number of joint states of an ordered variable scope."""
    n = 1
    for v in scope:
        n *= v.cardinality
    return n


def scope_cards(scope) -> tuple[int, ...]:
    return tuple(v.cardinality for v in scope)


def state_index(scope, assignment: dict) -> int:
    """Flat index of the joint state where each scope variable takes
    ``assignment[var]`` (row-major, last variable fastest)."""
    multi = tuple(assignment[v] for v in scope)
    return int(np.ravel_multi_index(multi, scope_cards(scope)))


def enumerate_states(scope):
    """Iterate joint states as tuples, in flat-index order."""
    return itertools.product(*(range(v.cardinality) for v in scope))


def consistency_mask(scope, evidence: dict) -> np.ndarray:
    """Boolean mask over joint states of ``scope`` that agree with
    ``evidence`` (a mapping variable -> state index).  Variables in the
    evidence that are outside the scope are ignored."""
    n = scope_size(scope)
    mask = np.ones(n, dtype=bool)
    cards = scope_cards(scope)
    for i, v in enumerate(scope):
        if v in evidence:
            idx = np.unravel_index(np.arange(n), cards)[i]
            mask &= idx == evidence[v]
    return mask


def _projection_index(outer_scope, inner_scope) -> np.ndarray:
    """For each joint state of ``outer_scope``, the flat index of its
    restriction to ``inner_scope`` (which must be a subset)."""
    outer = tuple(outer_scope)
    inner = tuple(inner_scope)
    pos = [outer.index(v) for v in inner]
    n = scope_size(outer)
    multi = np.unravel_index(np.arange(n), scope_cards(outer))
    return np.ravel_multi_index(tuple(multi[p] for p in pos), scope_cards(inner))


_PROJ_CACHE: dict = {}


def projection_index(outer_scope, inner_scope) -> np.ndarray:
    key = (tuple(outer_scope), tuple(inner_scope))
    got = _PROJ_CACHE.get(key)
    if got is None:
        got = _PROJ_CACHE[key] = _projection_index(outer_scope, inner_scope)
    return got


def expand_vector(values: np.ndarray, scope, target_scope) -> np.ndarray:
    """Lift a per-state vector over ``scope`` to ``target_scope`` by
    replicating entries across the extra variables' states."""
    if tuple(scope) == tuple(target_scope):
        return np.asarray(values, dtype=float)
    return np.asarray(values, dtype=float)[projection_index(target_scope, scope)]


def marginalize_vector(values: np.ndarray, scope, subset) -> np.ndarray:
    """Sum a per-state vector over the variables not in ``subset``."""
    if tuple(scope) == tuple(subset):
        return np.asarray(values, dtype=float)
    proj = projection_index(scope, subset)
    return np.bincount(proj, weights=np.asarray(values, dtype=float),
                       minlength=scope_size(subset))


@dataclass(frozen=True)
class DynamicsMatrix:
    """Square rate matrix over an ordered variable scope.

    Off-diagonal entries are nonnegative transition rates (1/time).  The
    diagonal is unconstrained: reduction by evidence breaks the zero
    row-sum property of true intensity matrices.  An empty scope is
    allowed and denotes a one-state (scalar) process.
    """

    scope: tuple
    entries: np.ndarray

    def __post_init__(self):
        ent = np.array(self.entries, dtype=float)
        n = scope_size(self.scope)
        if ent.shape != (n, n):
            raise ModelValidationError(
                f"dynamics matrix over {self.scope} must be {n}x{n}, got {ent.shape}"
            )
        off = ent - np.diag(np.diag(ent))
        if off.size and off.min() < 0:
            raise ModelValidationError(
                f"negative off-diagonal rate {off.min():g} in dynamics matrix"
            )
        object.__setattr__(self, "scope", tuple(self.scope))
        object.__setattr__(self, "entries", ent)
        ent.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def rate_owners(self) -> set:
        """Variables whose transitions this matrix assigns nonzero rate to."""
        owners = set()
        cards = scope_cards(self.scope)
        n = self.dim
        multi = np.array(np.unravel_index(np.arange(n), cards)).T if self.scope else np.zeros((1, 0), int)
        rows, cols = np.nonzero(self.entries - np.diag(np.diag(self.entries)))
        for r, c in zip(rows, cols):
            changed = np.nonzero(multi[r] != multi[c])[0]
            for k in changed:
                owners.add(self.scope[k])
        return owners

    def expand(self, target_scope) -> np.ndarray:
        """Entries lifted to ``target_scope``: transitions replicate across
        the extra variables' states; a lifted transition never changes a
        variable outside the original scope."""
        if tuple(target_scope) == self.scope:
            return self.entries.copy()
        idx_in = projection_index(target_scope, self.scope)
        extra = [v for v in target_scope if v not in self.scope]
        out = self.entries[np.ix_(idx_in, idx_in)]
        if extra:
            idx_out = projection_index(target_scope, extra)
            out = out * (idx_out[:, None] == idx_out[None, :])
        return out


class IntensityMatrix(DynamicsMatrix):
    """Dynamics matrix that is a true Markov-process generator: each
    diagonal entry is the negated sum of its row's off-diagonal entries."""

    def __post_init__(self):
        super().__post_init__()
        ent = self.entries
        off_sum = ent.sum(axis=1) - np.diag(ent)
        resid = np.abs(np.diag(ent) + off_sum)
        scale = np.maximum(np.abs(np.diag(ent)), np.abs(off_sum))
        bad = resid > DIAG_RTOL * np.maximum(scale, 1.0)
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise ModelValidationError(
                f"row {i}: diagonal {ent[i, i]:g} is not the negated "
                f"off-diagonal sum {off_sum[i]:g}"
            )


def amalgamate(matrices, scope=None) -> DynamicsMatrix:
    """Combine dynamics matrices over (possibly different) scopes into one
    matrix over the union scope by expanding and summing.

    Each input is lifted to the union scope (replicating entries across
    out-of-scope states; a single lifted transition never changes two
    inputs' variables simultaneously) and the lifted matrices are added
    entrywise.  Supplying rates for the same variable twice double-counts
    its dynamics and is rejected.

    Parameters
    ----------
    matrices : iterable of DynamicsMatrix
    scope : optional explicit target scope (must contain every input scope);
        defaults to the input scopes merged in order of first appearance.
    """
    matrices = list(matrices)
    if scope is None:
        merged = []
        for m in matrices:
            for v in m.scope:
                if v not in merged:
                    merged.append(v)
        scope = tuple(merged)
    else:
        scope = tuple(scope)
        for m in matrices:
            missing = [v for v in m.scope if v not in scope]
            if missing:
                raise ModelValidationError(f"target scope is missing {missing}")
    seen_owners: dict = {}
    for m in matrices:
        for v in m.rate_owners():
            if v in seen_owners:
                raise ScopeCollisionError(
                    f"dynamics for variable {v.name!r} supplied twice; "
                    "each variable's rates must enter an amalgamation once"
                )
            seen_owners[v] = m
    n = scope_size(scope)
    total = np.zeros((n, n))
    for m in matrices:
        total += m.expand(scope)
    return DynamicsMatrix(scope, total)


def reduce_matrix(m: DynamicsMatrix, evidence: dict) -> DynamicsMatrix:
    """Zero every row and column of ``m`` indexed by a joint state that is
    inconsistent with the evidence (variable -> observed state).  Rows of
    consistent states keep their diagonal: no renormalization, so the
    result is generally not a true intensity matrix."""
    for v in evidence:
        if v not in m.scope:
            raise ModelValidationError(f"evidence variable {v.name!r} outside scope")
    if not evidence:
        return DynamicsMatrix(m.scope, m.entries)
    mask = consistency_mask(m.scope, evidence)
    ent = m.entries.copy()
    ent[~mask, :] = 0.0
    ent[:, ~mask] = 0.0
    return DynamicsMatrix(m.scope, ent)


def reduce_point(dist: np.ndarray, scope, evidence: dict) -> np.ndarray:
    """Zero the entries of a per-state vector that are inconsistent with
    the evidence.  The result is unnormalized; an all-zero result means
    the evidence has probability zero under the current approximation."""
    for v in evidence:
        if v not in scope:
            raise ModelValidationError(f"evidence variable {v.name!r} outside scope")
    out = np.asarray(dist, dtype=float).copy()
    if evidence:
        out[~consistency_mask(scope, evidence)] = 0.0
    if np.asarray(dist).any() and not out.any():
        raise ZeroProbabilityError("evidence has zero probability under this distribution")
    return out


@dataclass(frozen=True)
class SufficientStats:
    """Expected residence times and transition counts over a joint scope.

    ``residence[x]`` is E[T[x]] (time units); ``transitions[x, x']`` is
    E[M[x, x']] for x != x' (dimensionless counts, zero diagonal).
    """

    scope: tuple
    residence: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        res = np.array(self.residence, dtype=float)
        tr = np.array(self.transitions, dtype=float)
        n = scope_size(self.scope)
        if res.shape != (n,) or tr.shape != (n, n):
            raise ModelValidationError("sufficient-statistics shapes do not match scope")
        if res.size and res.min() < -1e-12 or tr.size and tr.min() < -1e-12:
            raise ModelValidationError("negative expected statistics")
        np.fill_diagonal(tr, 0.0)
        object.__setattr__(self, "scope", tuple(self.scope))
        object.__setattr__(self, "residence", np.maximum(res, 0.0))
        object.__setattr__(self, "transitions", np.maximum(tr, 0.0))

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        if self.scope != other.scope:
            raise ModelValidationError("cannot add stats over different scopes")
        return SufficientStats(self.scope, self.residence + other.residence,
                               self.transitions + other.transitions)

    def total_time(self) -> float:
        return float(self.residence.sum())


def marginal_stats(stats: SufficientStats, subset) -> SufficientStats:
    """Project sufficient statistics onto a variable subset.

    Residence of a subset state sums residence over all consistent joint
    states.  A joint transition contributes to the subset pair it projects
    to; transitions whose projection does not change state are dropped
    (they are invisible at the subset level).
    """
    subset = tuple(subset)
    for v in subset:
        if v not in stats.scope:
            raise ModelValidationError(f"{v.name!r} not in stats scope")
    if subset == stats.scope:
        return stats
    proj = projection_index(stats.scope, subset)
    m = scope_size(subset)
    res = np.bincount(proj, weights=stats.residence, minlength=m)
    agg = np.zeros((m, scope_size(stats.scope)))
    agg[proj, np.arange(len(proj))] = 1.0
    tr = agg @ stats.transitions @ agg.T
    np.fill_diagonal(tr, 0.0)
    return SufficientStats(subset, res, tr)


@dataclass(frozen=True)
class ConditionalIntensityMatrix:
    """One variable's intensity matrices, indexed by its parents' joint
    state (row-major over the parent order, last parent fastest)."""

    child: Variable
    parents: tuple
    matrices: dict  # parent state tuple -> IntensityMatrix over (child,)

    def __post_init__(self):
        object.__setattr__(self, "parents", tuple(self.parents))
        expected = set(enumerate_states(self.parents))
        got = set(self.matrices)
        if got != expected:
            raise ModelValidationError(
                f"CIM for {self.child.name!r}: parent instantiations {got} "
                f"do not cover {expected}"
            )
        for u, q in self.matrices.items():
            if not isinstance(q, IntensityMatrix) or q.scope != (self.child,):
                raise ModelValidationError(
                    f"CIM entry {u} must be an IntensityMatrix over ({self.child.name},)"
                )

    @property
    def family(self) -> tuple:
        """Scope the CIM lives over when amalgamated: parents then child."""
        return self.parents + (self.child,)

    def as_joint(self) -> IntensityMatrix:
        """The CIM as a single intensity matrix over ``(parents..., child)``:
        block-diagonal in the parent state, with no parent transitions."""
        fam = self.family
        n = scope_size(fam)
        card = self.child.cardinality
        out = np.zeros((n, n))
        for u in enumerate_states(self.parents):
            base = state_index(fam, {**dict(zip(self.parents, u)), self.child: 0})
            sl = slice(base, base + card)
            out[sl, sl] = self.matrices[u].entries
        return IntensityMatrix(fam, out)


@dataclass(frozen=True)
class InitialFactor:
    """One conditional probability table P(X^0 | U^0) of the time-0 network."""

    variable: Variable
    parents: tuple
    table: np.ndarray  # shape (n parent states, cardinality); rows sum to 1

    def __post_init__(self):
        tab = np.array(self.table, dtype=float)
        shape = (scope_size(self.parents), self.variable.cardinality)
        if tab.shape != shape:
            raise ModelValidationError(
                f"initial factor for {self.variable.name!r} must have shape {shape}"
            )
        if tab.min() < 0 or np.abs(tab.sum(axis=1) - 1.0).max() > 1e-12:
            raise ModelValidationError(
                f"initial factor rows for {self.variable.name!r} must sum to 1"
            )
        object.__setattr__(self, "parents", tuple(self.parents))
        object.__setattr__(self, "table", tab)
        tab.setflags(write=False)

    @property
    def scope(self) -> tuple:
        return self.parents + (self.variable,)

    def as_vector(self) -> np.ndarray:
        """Factor values per joint state of ``scope`` (parents..., child)."""
        return self.table.reshape(-1)


@dataclass(frozen=True)
class InitialDistribution:
    """Time-0 Bayesian network: factors in topological order."""

    factors: tuple  # of InitialFactor

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        seen = set()
        for f in self.factors:
            for p in f.parents:
                if p not in seen:
                    raise ModelValidationError(
                        f"initial factors are not in topological order: {p.name!r} "
                        f"is used before it is defined (time-0 graph must be acyclic)"
                    )
            if f.variable in seen:
                raise ModelValidationError(f"duplicate initial factor for {f.variable.name!r}")
            seen.add(f.variable)

    @property
    def variables(self) -> tuple:
        return tuple(f.variable for f in self.factors)

    def factor_for(self, var: Variable) -> InitialFactor:
        for f in self.factors:
            if f.variable == var:
                return f
        raise KeyError(var)

    def joint(self, scope) -> np.ndarray:
        """Joint probability vector over ``scope`` (which must contain every
        factor's scope), computed as the product of lifted factors."""
        out = np.ones(scope_size(scope))
        for f in self.factors:
            out *= expand_vector(f.as_vector(), f.scope, scope)
        return out


def point_mass_initial(variables, state: dict) -> InitialDistribution:
    """Initial distribution that fixes every variable to ``state[var]``
    (a known, fully observed starting configuration)."""
    factors = []
    for v in variables:
        tab = np.zeros((1, v.cardinality))
        tab[0, state[v]] = 1.0
        factors.append(InitialFactor(v, (), tab))
    return InitialDistribution(tuple(factors))


@dataclass(frozen=True)
class CtbnModel:
    """A continuous-time Bayesian network.

    ``graph`` maps each variable to its (possibly cyclic) parent tuple in
    the continuous transition model; ``initial`` is the time-0 Bayesian
    network; ``cims`` holds one conditional intensity matrix per variable.
    """

    variables: tuple
    graph: dict  # Variable -> tuple of parent Variables
    initial: InitialDistribution
    cims: dict  # Variable -> ConditionalIntensityMatrix

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        vs = set(self.variables)
        if set(self.graph) != vs or set(self.cims) != vs:
            raise ModelValidationError("graph and cims must cover exactly the model variables")
        for v in self.variables:
            cim = self.cims[v]
            if cim.child != v or cim.parents != tuple(self.graph[v]):
                raise ModelValidationError(
                    f"CIM for {v.name!r} does not match its graph parent set"
                )
        if set(self.initial.variables) != vs:
            raise ModelValidationError("initial distribution must cover all variables")

    def var(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def family(self, v: Variable) -> tuple:
        return tuple(self.graph[v]) + (v,)

    def joint_size(self) -> int:
        return scope_size(self.variables)

    def with_initial(self, initial: InitialDistribution) -> "CtbnModel":
        return CtbnModel(self.variables, self.graph, initial, self.cims)


@dataclass(frozen=True)
class IntervalEvidence:
    """Observations of the form "variable = state throughout [t1, t2]".

    For dynamics reduction the interval acts half-open, [t1, t2): the
    transition out of the observed state at t2 is governed by the
    unreduced dynamics.  Point vectors at t1 (start) and t2 (end) are
    reduced on the closed endpoints.
    """

    items: tuple  # of (Variable, state, t1, t2)

    def __post_init__(self):
        items = tuple((v, int(s), float(a), float(b)) for v, s, a, b in self.items)
        object.__setattr__(self, "items", items)
        per_var: dict = {}
        for v, s, a, b in items:
            if not 0 <= a < b:
                raise ModelValidationError(f"bad evidence interval [{a}, {b}] for {v.name!r}")
            if not 0 <= s < v.cardinality:
                raise ModelValidationError(f"state {s} out of range for {v.name!r}")
            per_var.setdefault(v, []).append((a, b))
        for v, spans in per_var.items():
            spans.sort()
            for (a1, b1), (a2, b2) in zip(spans, spans[1:]):
                if a2 < b1 - 1e-15:
                    raise ModelValidationError(
                        f"overlapping evidence intervals for {v.name!r}: "
                        f"[{a1},{b1}] and [{a2},{b2}]"
                    )

    def __len__(self):
        return len(self.items)

    def active(self, t: float, scope=None) -> dict:
        """Evidence in force on [t, t+dt): mapping variable -> state."""
        out = {}
        for v, s, a, b in self.items:
            if a <= t < b and (scope is None or v in scope):
                out[v] = s
        return out

    def starting_at(self, t: float, scope=None) -> dict:
        """Evidence whose closed interval contains ``t`` from the left
        (used to reduce point vectors at interval starts)."""
        out = {}
        for v, s, a, b in self.items:
            if a <= t < b - 1e-15 and (scope is None or v in scope):
                out[v] = s
        return out

    def ending_at(self, t: float, scope=None) -> dict:
        """Evidence whose closed interval contains ``t`` from the right
        (used to reduce point vectors at interval ends)."""
        out = {}
        for v, s, a, b in self.items:
            if a + 1e-15 < t <= b and (scope is None or v in scope):
                out[v] = s
        return out

    def at_point(self, t: float, scope=None) -> dict:
        """Evidence constraining the state exactly at time ``t`` (closed
        intervals)."""
        out = {}
        for v, s, a, b in self.items:
            if a <= t <= b and (scope is None or v in scope):
                out[v] = s
        return out

    def boundaries(self, scope=None, lo=None, hi=None) -> list:
        """Sorted distinct endpoint times, optionally clipped to [lo, hi]
        and restricted to evidence on ``scope`` variables."""
        ts = set()
        for v, _s, a, b in self.items:
            if scope is not None and v not in scope:
                continue
            for t in (a, b):
                if (lo is None or t >= lo - 1e-15) and (hi is None or t <= hi + 1e-15):
                    ts.add(t)
        return sorted(ts)

    def restrict(self, scope) -> "IntervalEvidence":
        return IntervalEvidence(tuple(it for it in self.items if it[0] in scope))


EMPTY_EVIDENCE = IntervalEvidence(())
