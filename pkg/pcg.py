# masrc/pcg.py
"""
Place continuity graph.

Shots whose similar-shot count is a local maximum inside the window are
treated as wide shots (overview of a place); every other shot is a detail
shot affiliated with one wide shot. Messages then flow detail -> wide and
back wide -> detail through softmax-normalised bilinear edges.
"""
import logging
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from ejg import EdgeMatrix, cosine_matrix
from kernel import (GradDict, ParamStore, add_grad, glorot_uniform, masked_softmax,
                    masked_softmax_backward, residual_gcn_block, residual_gcn_block_backward)

logger = logging.getLogger(__name__)

# Similarities within this margin of the window mean do not count as "above" it.
SIMILARITY_TOLERANCE = 1e-9

AffiliationRule = Literal["both", "similarity", "proximity"]
STAGES = ("d2w", "w2d")
STAGE_LAYER = {"d2w": 1, "w2d": 2}


@dataclass(frozen=True, eq=False)
class WideDetailPartition:
    counts: np.ndarray
    wide_set: tuple[int, ...]
    detail_set: tuple[int, ...]
    affiliation: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        size = len(self.counts)
        wide, detail = set(self.wide_set), set(self.detail_set)
        if wide & detail or wide | detail != set(range(size)):
            raise ValueError("Wide and detail sets must partition the window.")
        if set(self.affiliation) != detail or not set(self.affiliation.values()) <= wide:
            raise ValueError("Every detail shot needs exactly one wide-shot affiliation.")


def similar_count(s: np.ndarray) -> np.ndarray:
    """n_i = number of j (self included) with S_ij strictly above the window's mean similarity."""
    mean = s.mean()
    return ((s - mean) > SIMILARITY_TOLERANCE).sum(axis=1).astype(np.int64)


def select_wide(n) -> tuple[list[int], list[int]]:
    """Local maxima of n (window edges compare with their single neighbour); never empty."""
    n = np.asarray(n)
    size = len(n)
    if size < 2:
        raise ValueError("select_wide needs at least two shots.")
    padded = np.concatenate(([-np.inf], n.astype(np.float64), [-np.inf]))
    is_wide = (padded[1:-1] > padded[:-2]) & (padded[1:-1] > padded[2:])
    wide = np.nonzero(is_wide)[0].tolist()
    if not wide:
        wide = [int(np.argmax(n))]
    wide_lookup = set(wide)
    detail = [i for i in range(size) if i not in wide_lookup]
    return wide, detail


def _affinity(s: np.ndarray, i: int, j: int, rule: AffiliationRule) -> float:
    if rule == "similarity":
        return float(s[i, j])
    if rule == "proximity":
        return 1.0 / abs(i - j)
    return float(s[i, j]) + 1.0 / abs(i - j)


def affiliate(s: np.ndarray, wide_set, detail_set, rule: AffiliationRule = "both") -> dict[int, int]:
    """
    j*_i = argmax_j of the affinity between detail shot i and wide shot j.

    ``rule`` picks the affinity: ``both`` is S_ij + 1/|i-j|, ``similarity`` is
    S_ij alone and ``proximity`` is 1/|i-j| alone. Ties go to the nearer wide
    shot, then the smaller index.
    """
    if rule not in ("both", "similarity", "proximity"):
        raise ValueError(f"Unknown affiliation rule {rule!r}.")
    if not wide_set:
        raise ValueError("affiliate needs at least one wide shot.")
    affiliation = {}
    for i in detail_set:
        best = min(wide_set, key=lambda j: (-_affinity(s, i, j, rule), abs(i - j), j))
        affiliation[int(i)] = int(best)
    return affiliation


def build_partition(x_place: np.ndarray, rule: AffiliationRule = "both") -> WideDetailPartition:
    s = cosine_matrix(x_place)
    counts = similar_count(s)
    wide, detail = select_wide(counts)
    return WideDetailPartition(counts=counts, wide_set=tuple(wide), detail_set=tuple(detail),
                               affiliation=affiliate(s, wide, detail, rule))


def _checked_stages(stages: Sequence[str]) -> tuple[str, ...]:
    unknown = [s for s in stages if s not in STAGES]
    if unknown or not stages:
        raise ValueError(f"PCG stages must be a non-empty subset of {STAGES}, got {tuple(stages)}.")
    return tuple(s for s in STAGES if s in stages)


def pcg_slot_names(prefix: str = "pcg", stages: Sequence[str] = STAGES) -> list[str]:
    names = []
    for stage in _checked_stages(stages):
        i = STAGE_LAYER[stage]
        names += [f"{prefix}.{stage}.w1", f"{prefix}.{stage}.w2", f"{prefix}.gcn{i}.weight",
                  f"{prefix}.ln{i}.gamma", f"{prefix}.ln{i}.beta"]
    return names


def init_pcg_params(store: ParamStore, dim: int, rng: np.random.Generator,
                    prefix: str = "pcg", dtype=np.float32, stages: Sequence[str] = STAGES) -> None:
    """Registers the bilinear, GCN and LN slots of every enabled stage."""
    stages = _checked_stages(stages)
    for stage in stages:
        store.add(f"{prefix}.{stage}.w1", glorot_uniform((dim, dim), rng, dtype))
        store.add(f"{prefix}.{stage}.w2", glorot_uniform((dim, dim), rng, dtype))
    for stage in stages:
        store.add(f"{prefix}.gcn{STAGE_LAYER[stage]}.weight", glorot_uniform((dim, dim), rng, dtype))
    for stage in stages:
        i = STAGE_LAYER[stage]
        store.add(f"{prefix}.ln{i}.gamma", np.ones(dim, dtype=dtype))
        store.add(f"{prefix}.ln{i}.beta", np.zeros(dim, dtype=dtype))


def d2w_pairs(partition: WideDetailPartition) -> list[tuple[int, int]]:
    # Wide row j receives from each affiliated detail column i.
    return [(partition.affiliation[i], i) for i in partition.detail_set]


def w2d_pairs(partition: WideDetailPartition) -> list[tuple[int, int]]:
    # Detail row i receives from its wide column j*_i.
    return [(i, partition.affiliation[i]) for i in partition.detail_set]


def bilinear_edges(x: np.ndarray, w1: np.ndarray, w2: np.ndarray, pairs) -> np.ndarray:
    """E[r, c] = (W1 x_r)^T (W2 x_c) on the listed pairs, -inf elsewhere."""
    p1, p2 = x @ w1.T, x @ w2.T
    e = np.full((x.shape[0], x.shape[0]), -np.inf, dtype=x.dtype)
    for r, c in pairs:
        e[r, c] = p1[r] @ p2[c]
    return e


def bilinear_edges_backward(de: np.ndarray, x: np.ndarray, w1: np.ndarray, w2: np.ndarray, pairs):
    """Returns gradients for (x, w1, w2); only the listed pairs carry gradient."""
    p1, p2 = x @ w1.T, x @ w2.T
    dp1, dp2 = np.zeros_like(p1), np.zeros_like(p2)
    for r, c in pairs:
        g = de[r, c]
        dp1[r] += g * p2[c]
        dp2[c] += g * p1[r]
    return dp1 @ w1 + dp2 @ w2, dp1.T @ x, dp2.T @ x


def d2w_edges(x_place: np.ndarray, partition: WideDetailPartition, params: ParamStore,
              prefix: str = "pcg") -> EdgeMatrix:
    return EdgeMatrix(bilinear_edges(x_place, params[f"{prefix}.d2w.w1"], params[f"{prefix}.d2w.w2"],
                                     d2w_pairs(partition)))


def w2d_edges(x_d2w: np.ndarray, partition: WideDetailPartition, params: ParamStore,
              prefix: str = "pcg") -> EdgeMatrix:
    return EdgeMatrix(bilinear_edges(x_d2w, params[f"{prefix}.w2d.w1"], params[f"{prefix}.w2d.w2"],
                                     w2d_pairs(partition)))


def psd_forward_with_cache(x_place: np.ndarray, params: ParamStore, prefix: str = "pcg",
                           partition: WideDetailPartition | None = None, rule: AffiliationRule = "both",
                           stages: Sequence[str] = STAGES):
    """A disabled stage passes its input straight to the next one."""
    stages = _checked_stages(stages)
    if partition is None:
        partition = build_partition(x_place, rule)
    pairs_for = {"d2w": d2w_pairs(partition), "w2d": w2d_pairs(partition)}
    records = []
    h = x_place
    for stage in stages:
        i, pairs = STAGE_LAYER[stage], pairs_for[stage]
        e = bilinear_edges(h, params[f"{prefix}.{stage}.w1"], params[f"{prefix}.{stage}.w2"], pairs)
        a = masked_softmax(e)
        out, block_cache = residual_gcn_block(h, a, params[f"{prefix}.gcn{i}.weight"],
                                              params[f"{prefix}.ln{i}.gamma"], params[f"{prefix}.ln{i}.beta"])
        records.append((stage, i, pairs, h, a, block_cache))
        h = out
    return h, {"partition": partition, "stages": records}


def psd_forward(x_place: np.ndarray, params: ParamStore, prefix: str = "pcg", rule: AffiliationRule = "both",
                stages: Sequence[str] = STAGES) -> np.ndarray:
    """Short-range affinity features from the detail->wide then wide->detail passes."""
    return psd_forward_with_cache(x_place, params, prefix, rule=rule, stages=stages)[0]


def psd_backward(dout: np.ndarray, cache, params: ParamStore, grads: GradDict, prefix: str = "pcg") -> np.ndarray:
    """Accumulates parameter gradients (bilinear weights included) into ``grads``; returns d(input)."""
    dh = dout
    for stage, i, pairs, h_in, a, block_cache in reversed(cache["stages"]):
        dx, da, dw, dgamma, dbeta = residual_gcn_block_backward(
            dh, block_cache, params[f"{prefix}.gcn{i}.weight"], params[f"{prefix}.ln{i}.gamma"])
        add_grad(grads, f"{prefix}.gcn{i}.weight", dw)
        add_grad(grads, f"{prefix}.ln{i}.gamma", dgamma)
        add_grad(grads, f"{prefix}.ln{i}.beta", dbeta)
        de = masked_softmax_backward(da, a)
        dx_edges, dw1, dw2 = bilinear_edges_backward(
            de, h_in, params[f"{prefix}.{stage}.w1"], params[f"{prefix}.{stage}.w2"], pairs)
        add_grad(grads, f"{prefix}.{stage}.w1", dw1)
        add_grad(grads, f"{prefix}.{stage}.w2", dw2)
        dh = dx + dx_edges
    return dh
