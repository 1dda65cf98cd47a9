"""Exact joint-trajectory sampling from a CTBN (competing exponential
clocks), plus conversion of trajectories into interval evidence.

Randomness comes from ``numpy.random.default_rng`` (the PCG64 generator),
so a given (model, horizon, seed) triple reproduces the same trajectory
bit-exactly on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CtbnModel, IntervalEvidence


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-constant joint path: ``segments`` is a tuple of
    (state tuple, start time) with strictly increasing start times, the
    first at 0.  Consecutive segments differ in exactly one variable."""

    variables: tuple
    segments: tuple
    horizon: float
    seed: int

    def state_at(self, t: float) -> tuple:
        if not 0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        cur = self.segments[0][0]
        for state, start in self.segments:
            if start > t:
                break
            cur = state
        return cur

    def value_span(self, var, t1: float, t2: float):
        """The constant value of ``var`` on [t1, t2], or None if it changes."""
        vi = self.variables.index(var)
        vals = set()
        for i, (state, start) in enumerate(self.segments):
            end = self.segments[i + 1][1] if i + 1 < len(self.segments) else self.horizon
            if start < t2 and end > t1:
                vals.add(state[vi])
            if len(vals) > 1:
                return None
        return vals.pop()


def sample_trajectory(model: CtbnModel, horizon: float, seed: int) -> Trajectory:
    """Draw one joint trajectory over [0, horizon].

    The initial state comes from the time-0 network; afterwards each
    variable holds an exponential clock with the rate of its current state
    under its current parent context.  The earliest clock fires, the
    variable jumps according to its rate row, and only clocks whose rate
    context changed (the winner and any variable with the winner as a
    parent) are redrawn — exact by memorylessness.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    vs = model.variables
    vi = {v: i for i, v in enumerate(vs)}
    by_var: dict = {}
    for f in model.initial.factors:  # topological order by construction
        if f.parents:
            u = np.ravel_multi_index(tuple(by_var[p] for p in f.parents),
                                     tuple(p.cardinality for p in f.parents))
            row = f.table[u]
        else:
            row = f.table[0]
        by_var[f.variable] = int(rng.choice(f.variable.cardinality, p=row))
    state = [by_var[v] for v in vs]

    children = {v: [w for w in vs if v in model.graph[w]] for v in vs}

    def leave_rate(v):
        u = tuple(state[vi[p]] for p in model.graph[v])
        row = model.cims[v].matrices[u].entries[state[vi[v]]]
        return -row[state[vi[v]]], row

    next_fire = np.full(len(vs), np.inf)
    t = 0.0
    for i, v in enumerate(vs):
        rate, _ = leave_rate(v)
        if rate > 0:
            next_fire[i] = t + rng.exponential(1.0 / rate)

    segments = [(tuple(state), 0.0)]
    while True:
        i = int(np.argmin(next_fire))
        t_next = next_fire[i]
        if t_next >= horizon:
            break
        t = t_next
        v = vs[i]
        rate, row = leave_rate(v)
        probs = np.maximum(row, 0.0)
        probs[state[i]] = 0.0
        probs = probs / probs.sum()
        state[i] = int(rng.choice(v.cardinality, p=probs))
        segments.append((tuple(state), t))
        for w in (v, *children[v]):
            j = vi[w]
            r, _ = leave_rate(w)
            next_fire[j] = t + rng.exponential(1.0 / r) if r > 0 else np.inf
    return Trajectory(vs, tuple(segments), float(horizon), seed)


def evidence_from_trajectory(traj: Trajectory, requests) -> IntervalEvidence:
    """Read interval evidence off a trajectory.

    ``requests`` is an iterable of (variable, t1, t2); each interval must
    lie inside one constant segment of that variable, otherwise the value
    is ambiguous and a ValueError is raised.
    """
    items = []
    for var, t1, t2 in requests:
        val = traj.value_span(var, t1, t2)
        if val is None:
            raise ValueError(
                f"{var.name!r} changes value inside [{t1}, {t2}]; "
                "request intervals within segments"
            )
        items.append((var, val, t1, t2))
    return IntervalEvidence(tuple(items))


def clamped_variable_evidence(traj: Trajectory, var) -> IntervalEvidence:
    """Full readback of one variable: one evidence item per constant span."""
    vi = traj.variables.index(var)
    items = []
    start = 0.0
    cur = traj.segments[0][0][vi]
    for state, t in traj.segments[1:]:
        if state[vi] != cur:
            items.append((var, cur, start, t))
            start, cur = t, state[vi]
    if traj.horizon > start:
        items.append((var, cur, start, traj.horizon))
    return IntervalEvidence(tuple(items))
