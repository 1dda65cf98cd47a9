"""Versioned JSON file formats for models, evidence, and cluster-graph
layouts, plus trajectory CSV output.

Model file (format_version 1): ``variables`` as [{name, cardinality}],
``graph`` mapping child name to parent-name list, ``initial`` as ordered
factors [{variable, parents, table}] with the table rows indexed row-major
over the parent order, and ``cims`` mapping child name to
{parent-instantiation key: row-major rate matrix}.  A parent instantiation
key is the comma-joined parent state indices in the CIM's parent order;
the empty string keys a parentless CIM.

Evidence file (format_version 1): ``items`` as [{variable, state, t1, t2}].

Layout file (format_version 1): ``subsets`` as variable-name lists and
``cuts`` as per-subset interior cut-time lists.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .errors import ModelValidationError
from .model import (ConditionalIntensityMatrix, CtbnModel, InitialDistribution,
                    InitialFactor, IntensityMatrix, IntervalEvidence, Variable)

MODEL_FORMAT_VERSION = 1
EVIDENCE_FORMAT_VERSION = 1
LAYOUT_FORMAT_VERSION = 1


def _check_version(doc: dict, expected: int, kind: str):
    got = doc.get("format_version")
    if got != expected:
        raise ModelValidationError(
            f"{kind} file format_version {got!r} unsupported (expected {expected})"
        )


def _u_key(u: tuple) -> str:
    return ",".join(str(s) for s in u)


def _parse_u_key(key: str) -> tuple:
    return tuple(int(s) for s in key.split(",")) if key else ()


def model_to_dict(model: CtbnModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "variables": [{"name": v.name, "cardinality": v.cardinality}
                      for v in model.variables],
        "graph": {v.name: [p.name for p in model.graph[v]] for v in model.variables},
        "initial": [
            {"variable": f.variable.name,
             "parents": [p.name for p in f.parents],
             "table": f.table.tolist()}
            for f in model.initial.factors
        ],
        "cims": {
            v.name: {_u_key(u): q.entries.tolist()
                     for u, q in sorted(model.cims[v].matrices.items())}
            for v in model.variables
        },
    }


def model_from_dict(doc: dict) -> CtbnModel:
    _check_version(doc, MODEL_FORMAT_VERSION, "model")
    vs = tuple(Variable(d["name"], int(d["cardinality"])) for d in doc["variables"])
    by_name = {v.name: v for v in vs}
    graph = {by_name[child]: tuple(by_name[p] for p in parents)
             for child, parents in doc["graph"].items()}
    factors = tuple(
        InitialFactor(by_name[d["variable"]],
                      tuple(by_name[p] for p in d["parents"]),
                      np.asarray(d["table"], dtype=float))
        for d in doc["initial"]
    )
    cims = {}
    for child, table in doc["cims"].items():
        v = by_name[child]
        parents = graph[v]
        mats = {_parse_u_key(k): IntensityMatrix((v,), np.asarray(m, dtype=float))
                for k, m in table.items()}
        cims[v] = ConditionalIntensityMatrix(v, parents, mats)
    return CtbnModel(vs, graph, InitialDistribution(factors), cims)


def save_model(model: CtbnModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> CtbnModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def evidence_to_dict(evidence: IntervalEvidence) -> dict:
    return {
        "format_version": EVIDENCE_FORMAT_VERSION,
        "items": [{"variable": v.name, "state": s, "t1": a, "t2": b}
                  for v, s, a, b in evidence.items],
    }


def evidence_from_dict(doc: dict, model: CtbnModel) -> IntervalEvidence:
    _check_version(doc, EVIDENCE_FORMAT_VERSION, "evidence")
    return IntervalEvidence(tuple(
        (model.var(d["variable"]), int(d["state"]), float(d["t1"]), float(d["t2"]))
        for d in doc["items"]
    ))


def save_evidence(evidence: IntervalEvidence, path):
    with open(path, "w") as fh:
        json.dump(evidence_to_dict(evidence), fh, indent=1)


def load_evidence(path, model: CtbnModel) -> IntervalEvidence:
    with open(path) as fh:
        return evidence_from_dict(json.load(fh), model)


def save_layout(subsets, cuts, path):
    doc = {
        "format_version": LAYOUT_FORMAT_VERSION,
        "subsets": [[v.name for v in s] for s in subsets],
        "cuts": [list(map(float, c)) for c in cuts],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_layout(path, model: CtbnModel):
    with open(path) as fh:
        doc = json.load(fh)
    _check_version(doc, LAYOUT_FORMAT_VERSION, "layout")
    subsets = [tuple(model.var(n) for n in names) for names in doc["subsets"]]
    cuts = [list(map(float, c)) for c in doc["cuts"]]
    return subsets, cuts


def trajectory_to_csv(traj, path):
    """One row per transition: time followed by every variable's state."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *(v.name for v in traj.variables)])
        for state, t in traj.segments:
            w.writerow([f"{t:.12g}", *state])
