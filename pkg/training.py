# masrc/training.py
"""
Adam training of the scene-boundary model under the supervised,
self-supervised (pseudo-label) and transfer regimes.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from tqdm import tqdm

from data_io import ShotSequence, WindowSample, iter_windows
from errors import ConfigError, NumericError
from kernel import ParamStore, check_finite
from mcd import init_masrc_params, masrc_forward, masrc_loss_and_grads
from metrics import evaluate_predictions
from schemas import MetricsRecord, TrainConfig

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Which per-shot label array each regime trains on.
REGIME_LABELS = {"supervised": "labels", "self_supervised": "pseudo_labels"}


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup_steps``, then cosine decay towards 0."""
    if total_steps < 1 or not 0 <= step < total_steps:
        raise ValueError(f"step must lie in [0, {total_steps}), got {step}")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    if step < warmup_steps:
        return peak * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return peak
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / decay_steps))


@dataclass
class OptimizerState:
    """Adam moment estimates per parameter slot."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParamStore) -> "OptimizerState":
        return cls(m={n: np.zeros(params[n].shape) for n in params},
                   v={n: np.zeros(params[n].shape) for n in params})


def adam_step(params: ParamStore, state: OptimizerState, lr: float) -> None:
    """Applies one bias-corrected Adam update from the gradients held in ``params``."""
    for name in params:
        g = params.grad(name)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient in slot '{name}' at optimizer step {state.step + 1}; "
                               "no parameters were updated.")
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name in params:
        g = params.grad(name).astype(np.float64)
        m = state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        params.set_value(name, params[name] - update)


def _check_regime(sequences: Sequence[ShotSequence], regime: str) -> None:
    if not sequences:
        raise ConfigError("Training needs at least one video; the dataset is empty.")
    needed = ["labels", "pseudo_labels"] if regime == "transfer" else [REGIME_LABELS[regime]]
    for key in needed:
        missing = [s.video_id for s in sequences if getattr(s, key) is None]
        if missing:
            raise ConfigError(f"Regime '{regime}' needs {key} but {len(missing)} video(s) lack them "
                              f"(first: {missing[0]}).")
    dims = {(s.dim_entity, s.dim_place) for s in sequences}
    if len(dims) > 1:
        raise ConfigError(f"All videos must share feature dimensions, found {sorted(dims)}.")


def _target(sample: WindowSample, key: str) -> int:
    return int(sample.label if key == "labels" else sample.pseudo_label)


def batch_gradients(params: ParamStore, samples: Sequence[WindowSample], targets: Sequence[int],
                    config: TrainConfig, workers: int = 1):
    """
    Mean loss, per-window probabilities and mean gradients of a batch.

    Windows may run on several threads; the reduction always follows window order.
    """
    def one(item):
        sample, target = item
        return masrc_loss_and_grads(sample, params, config.modality, config.k, target)

    items = list(zip(samples, targets))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(item) for item in items]

    scale = 1.0 / len(results)
    mean_grads = {name: np.zeros(params[name].shape) for name in params}
    losses, probs = [], []
    for loss, prob, grads in results:
        losses.append(loss)
        probs.append(prob)
        for name, g in grads.items():
            mean_grads[name] += g
    for name in mean_grads:
        mean_grads[name] = (mean_grads[name] * scale).astype(params[name].dtype)
    mean_loss = float(np.mean(losses))
    if not math.isfinite(mean_loss):
        raise NumericError("Non-finite training loss.")
    return mean_loss, probs, mean_grads


def predict_scores(params: ParamStore, sequence: ShotSequence, config: TrainConfig, workers: int = 1) -> np.ndarray:
    """Boundary probability for every shot of one video."""
    samples = list(iter_windows(sequence, config.window))

    def one(sample):
        return masrc_forward(sample, params, config.modality, config.k)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(one, samples))
    else:
        scores = [one(s) for s in samples]
    return np.asarray(scores, dtype=np.float64)


def evaluate(params: ParamStore, sequences: Sequence[ShotSequence], config: TrainConfig,
             label_key: str = "labels", workers: int = 1) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (split metrics, per-video scores)."""
    scores = {seq.video_id: predict_scores(params, seq, config, workers) for seq in sequences}
    labelled = {seq.video_id: (scores[seq.video_id], getattr(seq, label_key)) for seq in sequences}
    missing = [vid for vid, (_, labels) in labelled.items() if labels is None]
    if missing:
        raise ConfigError(f"Cannot evaluate: video {missing[0]} has no {label_key}.")
    return evaluate_predictions(labelled, config.threshold, config.miou_mode), scores


@dataclass
class TrainResult:
    params: ParamStore
    records: list[MetricsRecord]
    best_epoch: int
    best_val_ap: float
    pretrained: Optional[ParamStore] = None

    @property
    def final_record(self) -> MetricsRecord:
        return self.records[-1]


def _val_label_key(sequences: Sequence[ShotSequence], preferred: str) -> str:
    if all(getattr(s, preferred) is not None for s in sequences):
        return preferred
    fallback = "pseudo_labels" if preferred == "labels" else "labels"
    logger.warning("Validation videos lack %s; selecting checkpoints on %s instead.", preferred, fallback)
    return fallback


def _run_phase(params: ParamStore, train_seqs: Sequence[ShotSequence], val_seqs: Sequence[ShotSequence],
               config: TrainConfig, label_key: str, peak_lr: float, epochs: int,
               phase: Optional[str], workers: int) -> TrainResult:
    windows = [w for seq in train_seqs for w in iter_windows(seq, config.window)]
    targets = [_target(w, label_key) for w in windows]
    steps_per_epoch = math.ceil(len(windows) / config.batch_size)
    total_steps = steps_per_epoch * epochs
    warmup_steps = min(steps_per_epoch * config.warmup_epochs, total_steps)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng(config.seed)

    select_seqs = val_seqs or train_seqs
    select_split = "val" if val_seqs else "train_eval"
    select_key = _val_label_key(select_seqs, "labels")

    records: list[MetricsRecord] = []
    baseline, _ = evaluate(params, select_seqs, config, select_key, workers)
    records.append(MetricsRecord(epoch=0, split=select_split, ap=baseline["ap"], miou=baseline["miou"],
                                 f1=baseline["f1"], phase=phase))
    best_params, best_ap, best_epoch = params.copy(), baseline["ap"], 0
    logger.info("%s epoch 0: %s AP %.4f (fresh parameters)", phase or "train", select_split, best_ap)

    stale, step = 0, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(windows))
        epoch_losses = []
        train_scores = {seq.video_id: np.zeros(seq.num_shots) for seq in train_seqs}
        bar = tqdm(total=steps_per_epoch, desc=f"{phase or 'train'} epoch {epoch}/{epochs}",
                   disable=None if config.show_progress else True, leave=False)
        for start in range(0, len(windows), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [windows[i] for i in idx]
            loss, probs, grads = batch_gradients(params, batch, [targets[i] for i in idx], config, workers)
            for sample, prob in zip(batch, probs):
                train_scores[sample.video_id][sample.center_index] = prob
            params.zero_grad()
            params.accumulate(grads)
            adam_step(params, state, lr_at(step, total_steps, warmup_steps, peak_lr))
            step += 1
            epoch_losses.append(loss * len(batch))
            bar.set_postfix(loss=f"{loss:.4f}")
            bar.update(1)
        bar.close()

        train_loss = float(np.sum(epoch_losses) / len(windows))
        # Scores were collected during the epoch, before each batch's update.
        train_metrics = evaluate_predictions(
            {s.video_id: (train_scores[s.video_id], getattr(s, label_key)) for s in train_seqs},
            config.threshold, config.miou_mode)
        records.append(MetricsRecord(epoch=epoch, split="train", ap=train_metrics["ap"], miou=train_metrics["miou"],
                                     f1=train_metrics["f1"], loss=train_loss, phase=phase))
        for name, value in params.items():
            check_finite(name, value)

        val_metrics, _ = evaluate(params, select_seqs, config, select_key, workers)
        records.append(MetricsRecord(epoch=epoch, split=select_split, ap=val_metrics["ap"],
                                     miou=val_metrics["miou"], f1=val_metrics["f1"], phase=phase))
        logger.info("%s epoch %d: loss %.4f, %s AP %.4f mIoU %.4f F1 %.4f", phase or "train", epoch, train_loss,
                    select_split, val_metrics["ap"], val_metrics["miou"], val_metrics["f1"])

        if val_metrics["ap"] > best_ap:
            best_params, best_ap, best_epoch, stale = params.copy(), val_metrics["ap"], epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("Stopping early after epoch %d: no AP improvement for %d epochs.", epoch, stale)
                break
    return TrainResult(params=best_params, records=records, best_epoch=best_epoch, best_val_ap=best_ap)


def train(train_seqs: Sequence[ShotSequence], config: TrainConfig,
          val_seqs: Sequence[ShotSequence] = (), workers: int = 1,
          init_params: Optional[ParamStore] = None) -> TrainResult:
    """
    Trains from a fresh (or given) parameter store and returns the parameters
    with the best validation AP along with the per-epoch metrics log.

    Without validation videos checkpoints are selected on the training videos
    (split ``train_eval``). The transfer regime pre-trains on pseudo labels at
    ``pretrain_lr`` and then fine-tunes the best pre-trained parameters on true
    labels at ``fine_tune_lr``.
    """
    _check_regime(train_seqs, config.regime)
    first = train_seqs[0]
    params = init_params.copy() if init_params is not None else init_masrc_params(
        config.modality, first.dim_entity, first.dim_place, config.window,
        hidden=config.hidden, seed=config.seed)
    logger.info("Training %s regime on %d videos (%d parameters, %d validation videos).",
                config.regime, len(train_seqs), params.num_parameters(), len(val_seqs))

    if config.regime != "transfer":
        return _run_phase(params, train_seqs, val_seqs, config, REGIME_LABELS[config.regime],
                          config.peak_lr, config.epochs, None, workers)

    pre = _run_phase(params, train_seqs, val_seqs, config, "pseudo_labels", config.pretrain_lr,
                     config.pretrain_epochs or config.epochs, "pretrain", workers)
    pretrained = pre.params.copy()
    fine = _run_phase(pre.params.copy(), train_seqs, val_seqs, config, "labels", config.fine_tune_lr,
                      config.epochs, "finetune", workers)
    return TrainResult(params=fine.params, records=pre.records + fine.records, best_epoch=fine.best_epoch,
                       best_val_ap=fine.best_val_ap, pretrained=pretrained)


def run_seeds(train_seqs: Sequence[ShotSequence], val_seqs: Sequence[ShotSequence], config: TrainConfig,
              seeds: Iterable[int], workers: int = 1) -> dict:
    """Trains once per seed; returns per-seed best validation AP and their mean."""
    per_seed = {}
    for seed in seeds:
        result = train(train_seqs, config.model_copy(update={"seed": int(seed)}), val_seqs, workers)
        per_seed[int(seed)] = result.best_val_ap
        logger.info("seed %d: best validation AP %.4f (epoch %d)", seed, result.best_val_ap, result.best_epoch)
    return {"per_seed": per_seed, "mean_ap": float(np.mean(list(per_seed.values())))}
