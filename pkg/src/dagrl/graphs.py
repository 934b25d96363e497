"""Binary adjacency matrices: acyclicity machinery and evaluation metrics.

An adjacency matrix is an n x n array with entries in {0, 1} and a zero
diagonal; entry (i, j) = 1 means an edge i -> j.  All functions here are
pure and safe for unrestricted parallel use.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

_TAYLOR_ORDER = 20  # remainder of sum_{k>K} 1/k! is far below 1e-12 once the norm is scaled to <= 1


def validate_adjacency(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    if np.trace(np.abs(a)) != 0:
        raise ValueError("adjacency diagonal must be zero (no self-loops)")
    return a.astype(np.int64)


def is_dag(a: np.ndarray) -> bool:
    """True iff a topological order exists (zero-in-degree elimination)."""
    a = np.asarray(a, dtype=np.int64)
    n = a.shape[0]
    indegree = a.sum(axis=0).astype(np.int64)
    active = np.ones(n, dtype=bool)
    queue = [i for i in range(n) if indegree[i] == 0]
    removed = 0
    while queue:
        node = queue.pop()
        active[node] = False
        removed += 1
        for j in np.nonzero(a[node])[0]:
            if active[j]:
                indegree[j] -= 1
                if indegree[j] == 0:
                    queue.append(j)
    return removed == n


def acyclicity_penalty(a: np.ndarray) -> float:
    """tr(exp(A)) - n: zero exactly on DAGs, positive otherwise.

    The exponential is computed by scaling-and-squaring on the truncated
    Taylor series; for binary matrices at this scale the truncation error
    is below 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    norm1 = np.abs(a).sum(axis=0).max() if n else 0.0
    squarings = max(0, int(math.ceil(math.log2(norm1)))) if norm1 > 1.0 else 0
    b = a / (2.0 ** squarings)
    term = np.eye(n)
    result = np.eye(n)
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ b / k
        result += term
    for _ in range(squarings):
        result = result @ result
    return max(float(np.trace(result)) - n, 0.0)


@dataclass
class GraphMetrics:
    """Edge-recovery metrics of an estimated graph against the truth."""

    shd: int
    tpr: float
    fdr: float
    correct_edges: int
    predicted_edges: int

    def to_dict(self) -> dict:
        return {
            "shd": self.shd,
            "tpr": self.tpr,
            "fdr": self.fdr,
            "correct_edges": self.correct_edges,
            "predicted_edges": self.predicted_edges,
        }


def graph_metrics(estimated: np.ndarray, truth: np.ndarray) -> GraphMetrics:
    """SHD / TPR / FDR with a reversed edge counting as one SHD operation.

    A reversed edge counts as a false discovery; TPR credits only correctly
    oriented edges.
    """
    estimated = np.asarray(estimated, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if estimated.shape != truth.shape:
        raise ValueError(f"graph size mismatch: {estimated.shape} vs {truth.shape}")
    n = estimated.shape[0]

    shd = 0
    for i in range(n):
        for j in range(i + 1, n):
            diff = int(estimated[i, j] != truth[i, j]) + int(estimated[j, i] != truth[j, i])
            swapped = (
                diff == 2
                and estimated[i, j] + estimated[j, i] == 1
                and truth[i, j] + truth[j, i] == 1
            )
            shd += 1 if swapped else diff

    true_positive = int(((estimated == 1) & (truth == 1)).sum())
    predicted = int(estimated.sum())
    truth_edges = int(truth.sum())
    reversed_edges = int(((estimated == 1) & (truth.T == 1) & (truth == 0)).sum())
    false_positive = predicted - true_positive - reversed_edges

    tpr = true_positive / truth_edges if truth_edges else 1.0
    fdr = (false_positive + reversed_edges) / max(1, predicted)
    return GraphMetrics(
        shd=shd,
        tpr=tpr,
        fdr=fdr,
        correct_edges=true_positive,
        predicted_edges=predicted,
    )


# -- serialization -------------------------------------------------------


def save_adjacency_csv(a: np.ndarray, path) -> None:
    a = np.asarray(a, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in a:
            fh.write(",".join(str(int(v)) for v in row))
            fh.write("\n")


def load_adjacency_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(float(v)) for v in line.split(",")])
    a = np.asarray(rows, dtype=np.int64)
    return validate_adjacency(a)


def save_edge_list_json(a: np.ndarray, path) -> None:
    a = np.asarray(a, dtype=np.int64)
    edges = [[int(i), int(j)] for i, j in zip(*np.nonzero(a))]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"n": int(a.shape[0]), "edges": edges}, fh)
        fh.write("\n")


def load_edge_list_json(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    n = int(payload["n"])
    a = np.zeros((n, n), dtype=np.int64)
    for i, j in payload["edges"]:
        a[int(i), int(j)] = 1
    return validate_adjacency(a)


def load_graph(path) -> np.ndarray:
    """Load an adjacency matrix from a .json edge list or a .csv matrix."""
    text = str(path)
    if text.endswith(".json"):
        return load_edge_list_json(path)
    return load_adjacency_csv(path)
