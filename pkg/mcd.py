# masrc/mcd.py
"""
Multi-shot comparison detection and the composed scene-boundary model.

The left half of a window (up to and including the target shot) is compared
with the right half through a context similarity matrix M; a small VGG-style
CNN encodes M and an MLP with a sigmoid scores the target shot as a scene end.
"""
import logging
from typing import Optional

import numpy as np

from data_io import WindowSample
from ejg import eld_backward, eld_forward_with_cache, init_ejg_params
from errors import ShapeMismatchError
from kernel import (PROB_FLOOR, GradCheckReport, GradDict, ParamStore, add_grad, bce_backward, bce_loss,
                    clamp_probability, conv2d_backward, conv2d_forward, glorot_uniform, grad_check,
                    l2_normalize, l2_normalize_backward, linear, linear_backward, maxpool2d,
                    maxpool2d_backward, relu, relu_backward, sigmoid)
from pcg import init_pcg_params, psd_backward, psd_forward_with_cache
from schemas import ModalityConfig

logger = logging.getLogger(__name__)

CONV_WIDTHS = (32, 64, 64, 64)
POOL_AFTER = (1, 3)  # zero-based conv layers followed by 2x2 max pooling
DEFAULT_HIDDEN = 128


# --- context similarity ----------------------------------------------------

def _context_similarity_cached(features: list[np.ndarray]):
    if not features:
        raise ValueError("context_similarity needs at least one feature matrix.")
    t = features[0].shape[0]
    if t % 2:
        raise ShapeMismatchError(f"Window length must be even, got {t}.")
    half = t // 2
    m = np.zeros((half, half), dtype=features[0].dtype)
    normalized = []
    for x in features:
        if x.shape[0] != t:
            raise ShapeMismatchError("All feature matrices must cover the same window.")
        u = l2_normalize(x)
        normalized.append(u)
        m = m + u[:half] @ u[half:].T
    return m, (features, normalized)


def context_similarity(x_lr: Optional[np.ndarray], x_sr: Optional[np.ndarray]) -> np.ndarray:
    """
    M[a, b] = cos(x_lr_a, x_lr_b') + cos(x_sr_a, x_sr_b') where a runs over the
    left half of the window (target shot included) and b' over the right half.
    Pass None for a modality that is switched off.
    """
    return _context_similarity_cached([x for x in (x_lr, x_sr) if x is not None])[0]


def context_similarity_backward(dm: np.ndarray, cache) -> list[np.ndarray]:
    features, normalized = cache
    half = dm.shape[0]
    grads = []
    for x, u in zip(features, normalized):
        du = np.zeros_like(u)
        du[:half] = dm @ u[half:]
        du[half:] = dm.T @ u[:half]
        grads.append(l2_normalize_backward(du, x))
    return grads


# --- CNN encoder and classifier --------------------------------------------

def flattened_size(side: int) -> int:
    if side < 4:
        raise ShapeMismatchError(f"Context matrix side {side} is too small for two 2x2 poolings (need >= 4).")
    spatial = side
    for layer in range(len(CONV_WIDTHS)):
        if layer in POOL_AFTER:
            spatial //= 2
    return CONV_WIDTHS[-1] * spatial * spatial


def init_mcd_params(store: ParamStore, side: int, rng: np.random.Generator, hidden: int = DEFAULT_HIDDEN,
                    zero_head: bool = True, prefix: str = "mcd", dtype=np.float32) -> None:
    in_ch = 1
    for layer, out_ch in enumerate(CONV_WIDTHS, start=1):
        store.add(f"{prefix}.conv{layer}.weight", glorot_uniform((out_ch, in_ch, 3, 3), rng, dtype))
        store.add(f"{prefix}.conv{layer}.bias", np.zeros(out_ch, dtype=dtype))
        in_ch = out_ch
    _init_head(store, flattened_size(side), hidden, rng, zero_head, prefix, dtype)


def _init_head(store: ParamStore, in_dim: int, hidden: int, rng: np.random.Generator,
               zero_head: bool, prefix: str, dtype) -> None:
    store.add(f"{prefix}.fc1.weight", glorot_uniform((in_dim, hidden), rng, dtype))
    store.add(f"{prefix}.fc1.bias", np.zeros(hidden, dtype=dtype))
    fc2 = np.zeros((hidden, 1), dtype=dtype) if zero_head else glorot_uniform((hidden, 1), rng, dtype)
    store.add(f"{prefix}.fc2.weight", fc2)
    store.add(f"{prefix}.fc2.bias", np.zeros(1, dtype=dtype))


def _head_forward(r: np.ndarray, params: ParamStore, prefix: str):
    h_pre = linear(r, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"])
    h = relu(h_pre)
    logit = linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])
    return logit[0], (r, h_pre, h)


def _head_backward(dlogit: float, cache, params: ParamStore, grads: GradDict, prefix: str) -> np.ndarray:
    r, h_pre, h = cache
    dlogit_vec = np.array([dlogit], dtype=h.dtype)
    dh, dw2, db2 = linear_backward(dlogit_vec, h, params[f"{prefix}.fc2.weight"])
    dh_pre = relu_backward(dh, h_pre)
    dr, dw1, db1 = linear_backward(dh_pre, r, params[f"{prefix}.fc1.weight"])
    add_grad(grads, f"{prefix}.fc1.weight", dw1)
    add_grad(grads, f"{prefix}.fc1.bias", db1)
    add_grad(grads, f"{prefix}.fc2.weight", dw2)
    add_grad(grads, f"{prefix}.fc2.bias", db2)
    return dr


def encode_with_cache(m: np.ndarray, params: ParamStore, prefix: str = "mcd"):
    """CNN + MLP on the context matrix; returns (logit, cache)."""
    side = m.shape[0]
    if m.shape != (side, side):
        raise ShapeMismatchError(f"Context matrix must be square, got {m.shape}.")
    flattened_size(side)
    x = m[None, :, :]
    layers = []
    for layer in range(len(CONV_WIDTHS)):
        w = params[f"{prefix}.conv{layer + 1}.weight"]
        pre = conv2d_forward(x, w, params[f"{prefix}.conv{layer + 1}.bias"])
        act = relu(pre)
        pooled = maxpool2d(act) if layer in POOL_AFTER else None
        layers.append((x, pre, act))
        x = pooled if pooled is not None else act
    r = x.reshape(-1)
    logit, head_cache = _head_forward(r, params, prefix)
    return logit, {"layers": layers, "feature_shape": x.shape, "head": head_cache}


def encode_backward(dlogit: float, cache, params: ParamStore, grads: GradDict, prefix: str = "mcd") -> np.ndarray:
    dr = _head_backward(dlogit, cache["head"], params, grads, prefix)
    dx = dr.reshape(cache["feature_shape"])
    for layer in range(len(CONV_WIDTHS) - 1, -1, -1):
        x_in, pre, act = cache["layers"][layer]
        dact = maxpool2d_backward(dx, act) if layer in POOL_AFTER else dx
        dpre = relu_backward(dact, pre)
        dx, dw, db = conv2d_backward(dpre, x_in, params[f"{prefix}.conv{layer + 1}.weight"])
        add_grad(grads, f"{prefix}.conv{layer + 1}.weight", dw)
        add_grad(grads, f"{prefix}.conv{layer + 1}.bias", db)
    return dx[0]


def encode_and_classify(m: np.ndarray, params: ParamStore, prefix: str = "mcd") -> float:
    """Probability that the target shot ends a scene, in [1e-7, 1 - 1e-7]."""
    logit, _ = encode_with_cache(m, params, prefix)
    return float(clamp_probability(sigmoid(logit)))


# --- composed model --------------------------------------------------------

def center_row(window: int) -> int:
    return window // 2 - 1


def _branch_prefix(branch: str, graph: str) -> str:
    return f"{branch}.{graph}"


def _branches(config: ModalityConfig) -> list[tuple[str, Optional[str]]]:
    """(branch, graph or None) for every active modality, entity first."""
    out = []
    if config.uses_entity:
        out.append(("entity", config.entity_graph if config.use_eld else None))
    if config.uses_place:
        out.append(("place", config.place_graph if config.use_psd else None))
    return out


def init_masrc_params(config: ModalityConfig, dim_entity: int, dim_place: int, window: int,
                      hidden: int = DEFAULT_HIDDEN, seed: int = 0, zero_head: bool = True,
                      dtype=np.float32) -> ParamStore:
    """
    Registers every learnable tensor of the configured model in a fresh ParamStore.

    With ``zero_head`` the output layer starts at zero so a fresh model predicts
    exactly 0.5 for every shot.
    """
    if window % 2 or window < 4:
        raise ValueError(f"Window length must be even and >= 4, got {window}.")
    rng = np.random.default_rng(seed)
    store = ParamStore()
    dims = {"entity": dim_entity, "place": dim_place}
    for branch, graph in _branches(config):
        if graph == "ejg":
            init_ejg_params(store, dims[branch], rng, _branch_prefix(branch, graph), dtype)
        elif graph == "pcg":
            init_pcg_params(store, dims[branch], rng, _branch_prefix(branch, graph), dtype, config.pcg_stages)
    if config.detector == "mcd":
        init_mcd_params(store, window // 2, rng, hidden, zero_head, "mcd", dtype)
    else:
        in_dim = sum(dims[branch] for branch, _ in _branches(config))
        _init_head(store, in_dim, hidden, rng, zero_head, "mlp", dtype)
    return store


def masrc_forward_with_cache(sample: WindowSample, params: ParamStore, config: ModalityConfig, k: int = 4):
    windows = {"entity": sample.entity_window, "place": sample.place_window}
    dtype = next(iter(params.items()))[1].dtype if len(params) else np.float32
    features, branch_caches = [], []
    for branch, graph in _branches(config):
        x = np.asarray(windows[branch], dtype=dtype)
        if graph == "ejg":
            out, cache = eld_forward_with_cache(x, params, k, _branch_prefix(branch, graph))
        elif graph == "pcg":
            out, cache = psd_forward_with_cache(x, params, _branch_prefix(branch, graph),
                                                rule=config.affiliation, stages=config.pcg_stages)
        else:
            out, cache = x, None
        features.append(out)
        branch_caches.append((branch, graph, cache))

    if config.detector == "mcd":
        m, sim_cache = _context_similarity_cached(features)
        logit, det_cache = encode_with_cache(m, params, "mcd")
    else:
        row = center_row(sample.window)
        r = np.concatenate([f[row] for f in features])
        sim_cache = None
        logit, det_cache = _head_forward(r, params, "mlp")
    raw = sigmoid(logit)
    prob = float(clamp_probability(raw))
    return prob, {"raw": float(raw), "branches": branch_caches, "features": features,
                  "similarity": sim_cache, "detector": det_cache, "config": config, "window": sample.window}


def masrc_forward(sample: WindowSample, params: ParamStore, config: ModalityConfig, k: int = 4) -> float:
    """Probability that the window's centre shot ends a scene."""
    return masrc_forward_with_cache(sample, params, config, k)[0]


def masrc_backward(dprob: float, cache, params: ParamStore) -> GradDict:
    """Gradients of every registered slot given d(loss)/d(probability)."""
    grads: GradDict = {}
    raw = cache["raw"]
    if not PROB_FLOOR < raw < 1.0 - PROB_FLOOR:
        dlogit = 0.0
    else:
        dlogit = dprob * raw * (1.0 - raw)
    config: ModalityConfig = cache["config"]
    if config.detector == "mcd":
        dm = encode_backward(dlogit, cache["detector"], params, grads, "mcd")
        dfeatures = context_similarity_backward(dm, cache["similarity"])
    else:
        dr = _head_backward(dlogit, cache["detector"], params, grads, "mlp")
        row = center_row(cache["window"])
        dfeatures, offset = [], 0
        for f in cache["features"]:
            df = np.zeros_like(f)
            df[row] = dr[offset:offset + f.shape[1]]
            offset += f.shape[1]
            dfeatures.append(df)

    for (branch, graph, branch_cache), dfeat in zip(cache["branches"], dfeatures):
        if graph == "ejg":
            eld_backward(dfeat, branch_cache, params, grads, _branch_prefix(branch, graph))
        elif graph == "pcg":
            psd_backward(dfeat, branch_cache, params, grads, _branch_prefix(branch, graph))
    for name in params:
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
    return grads


def masrc_loss_and_grads(sample: WindowSample, params: ParamStore, config: ModalityConfig, k: int,
                         target: int):
    """Returns (bce loss, probability, gradients) for one window."""
    prob, cache = masrc_forward_with_cache(sample, params, config, k)
    loss = bce_loss(np.array([prob]), np.array([float(target)]))
    dprob = float(bce_backward(np.array([cache["raw"]]), np.array([float(target)]))[0])
    return loss, prob, masrc_backward(dprob, cache, params)


# --- whole-model gradient suite --------------------------------------------

def random_window(rng: np.random.Generator, window: int, dim_entity: int, dim_place: int) -> WindowSample:
    """Window with two planted scenes, so similarities are neither uniform nor degenerate."""
    split = int(rng.integers(2, window - 1))
    centroids_e = rng.standard_normal((2, dim_entity))
    centroids_p = rng.standard_normal((2, dim_place))
    scene = (np.arange(window) >= split).astype(int)
    entity = centroids_e[scene] + 0.5 * rng.standard_normal((window, dim_entity))
    place = centroids_p[scene] + 0.5 * rng.standard_normal((window, dim_place))
    label = int(split == center_row(window) + 1)
    return WindowSample(center_index=center_row(window), entity_window=entity, place_window=place, label=label)


def model_gradient_suite(seeds: int = 5, window: int = 14, dim: int = 8, k: int = 4,
                         config: Optional[ModalityConfig] = None, eps: float = 1e-3, tolerance: float = 1e-4,
                         max_entries_per_slot: Optional[int] = 12) -> list[GradCheckReport]:
    """Finite-difference check of bce(masrc_forward(window), y) over every registered slot."""
    config = config or ModalityConfig()
    reports = []
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        sample = random_window(rng, window, dim, dim)
        params = init_masrc_params(config, dim, dim, window, seed=seed, zero_head=False, dtype=np.float64)
        # Non-trivial affine parameters so every slot carries gradient signal.
        for name in params.names():
            if name.endswith(".gamma"):
                params.set_value(name, 1.0 + 0.1 * rng.standard_normal(params[name].shape))
            elif name.endswith(".beta") or name.endswith(".bias"):
                params.set_value(name, 0.1 * rng.standard_normal(params[name].shape))
        target = int(sample.label)

        def objective(p: ParamStore):
            loss, _, grads = masrc_loss_and_grads(sample, p, config, k, target)
            return loss, grads

        report = grad_check(objective, params, eps=eps, tolerance=tolerance,
                            max_entries_per_slot=max_entries_per_slot, seed=seed)
        logger.info("model gradient check seed %d: max relative error %.3e", seed, report.max_error)
        reports.append(report)
    return reports
