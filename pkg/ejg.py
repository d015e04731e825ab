# masrc/ejg.py
"""
Entity jumping graph: each shot links to its k most similar shots in the
window (by cosine similarity of entity features), and two residual GCN blocks
smooth the features over that graph to give long-range affinity features.
"""
import logging
from dataclasses import dataclass

import numpy as np

from kernel import (GradDict, ParamStore, add_grad, glorot_uniform, l2_normalize,
                    residual_gcn_block, residual_gcn_block_backward)

logger = logging.getLogger(__name__)

NUM_LAYERS = 2


@dataclass(frozen=True, eq=False)
class EdgeMatrix:
    """Weighted T x T adjacency; entry (i, j) is the weight of the edge from j into i."""
    weights: np.ndarray

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    def edge_set(self) -> set[tuple[int, int]]:
        w = self.weights
        return {(int(i), int(j)) for i, j in zip(*np.nonzero(np.isfinite(w) & (w != 0)))}


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``x``; symmetric with unit diagonal."""
    u = l2_normalize(np.asarray(x, dtype=np.float64))
    s = u @ u.T
    s = np.clip(0.5 * (s + s.T), -1.0, 1.0)
    np.fill_diagonal(s, 1.0)
    return s


def ejg_edges(s: np.ndarray, k: int) -> EdgeMatrix:
    """Keeps, per row, the k largest off-diagonal similarities (ties go to the smaller column)."""
    t = s.shape[0]
    if not 1 <= k <= t - 1:
        raise ValueError(f"k must lie in [1, {t - 1}] for a window of {t} shots, got {k}.")
    weights = np.zeros_like(s, dtype=np.float64)
    columns = np.arange(t)
    for i in range(t):
        others = columns[columns != i]
        # lexsort sorts by the last key first: descending similarity, then ascending index.
        order = np.lexsort((others, -s[i, others]))
        keep = others[order[:k]]
        weights[i, keep] = s[i, keep]
    return EdgeMatrix(weights)


def normalize_adjacency(edges: EdgeMatrix) -> np.ndarray:
    """D^-1/2 (max(E, E^T) + I) D^-1/2 with negative weights clamped to zero."""
    e = np.where(np.isfinite(edges.weights), edges.weights, 0.0)
    e = np.maximum(e, 0.0)
    sym = np.maximum(e, e.T)
    a = sym + np.eye(sym.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def ejg_adjacency(x: np.ndarray, k: int) -> np.ndarray:
    return normalize_adjacency(ejg_edges(cosine_matrix(x), k))


def ejg_slot_names(prefix: str = "ejg") -> list[str]:
    names = []
    for i in range(1, NUM_LAYERS + 1):
        names += [f"{prefix}.gcn{i}.weight", f"{prefix}.ln{i}.gamma", f"{prefix}.ln{i}.beta"]
    return names


def init_ejg_params(store: ParamStore, dim: int, rng: np.random.Generator,
                    prefix: str = "ejg", dtype=np.float32) -> None:
    for i in range(1, NUM_LAYERS + 1):
        store.add(f"{prefix}.gcn{i}.weight", glorot_uniform((dim, dim), rng, dtype))
        store.add(f"{prefix}.ln{i}.gamma", np.ones(dim, dtype=dtype))
        store.add(f"{prefix}.ln{i}.beta", np.zeros(dim, dtype=dtype))


def eld_forward_with_cache(x: np.ndarray, params: ParamStore, k: int, prefix: str = "ejg"):
    a = ejg_adjacency(x, k).astype(x.dtype)
    caches = []
    h = x
    for i in range(1, NUM_LAYERS + 1):
        h, cache = residual_gcn_block(h, a, params[f"{prefix}.gcn{i}.weight"],
                                      params[f"{prefix}.ln{i}.gamma"], params[f"{prefix}.ln{i}.beta"])
        caches.append(cache)
    return h, caches


def eld_forward(x: np.ndarray, params: ParamStore, k: int, prefix: str = "ejg") -> np.ndarray:
    """Long-range affinity features: two residual GCN blocks over the entity jumping graph."""
    return eld_forward_with_cache(x, params, k, prefix)[0]


def eld_backward(dout: np.ndarray, caches, params: ParamStore, grads: GradDict, prefix: str = "ejg") -> np.ndarray:
    """Accumulates parameter gradients into ``grads``; the graph is a constant. Returns d(input)."""
    dh = dout
    for i in range(NUM_LAYERS, 0, -1):
        dh, _, dw, dgamma, dbeta = residual_gcn_block_backward(
            dh, caches[i - 1], params[f"{prefix}.gcn{i}.weight"], params[f"{prefix}.ln{i}.gamma"])
        add_grad(grads, f"{prefix}.gcn{i}.weight", dw)
        add_grad(grads, f"{prefix}.ln{i}.gamma", dgamma)
        add_grad(grads, f"{prefix}.ln{i}.beta", dbeta)
    return dh
