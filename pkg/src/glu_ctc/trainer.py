"""Training and prediction for the CTC, max-pooled and average-pooled taggers."""

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ctc
from .errors import AllInfeasibleError, EmptyDatasetError
from .labels import weak_from_sequential
from .nn.model import (Adam, ModelConfig, batch_loss, init_params, load_checkpoint, loss_and_grads,
                       model_forward, save_checkpoint)

log = logging.getLogger(__name__)

STOP_MAX_EPOCHS = "max_epochs"
STOP_EARLY = "early_stop"
TAG_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    head: str = "ctc"
    gating: str = "glu"
    max_epochs: int = 200
    lr: float = 0.001
    batch_size: int = 16
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(f"patience {self.patience} must be below max_epochs {self.max_epochs}")
        if not 0 < self.val_fraction < 0.5:
            raise ValueError(f"val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = ""
    best_epoch: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss),
                                 f"{rec.seconds:.3f}"])


@dataclass
class TrainedModel:
    """Parameters plus the feature standardization they were trained with."""

    params: dict
    config: ModelConfig
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, features):
        return ((np.asarray(features) - self.mean) / self.std).astype(np.float32)

    def save(self, directory):
        save_checkpoint(directory, self.params, self.config,
                        extra={"norm.mean": self.mean, "norm.std": self.std})

    @classmethod
    def load(cls, directory):
        arrays, config = load_checkpoint(directory)
        if "norm.mean" not in arrays or "norm.std" not in arrays:
            raise ValueError(f"{directory}: checkpoint has no normalization statistics")
        mean = arrays.pop("norm.mean")
        std = arrays.pop("norm.std")
        return cls(arrays, config, mean, std)


def _check_labels(labels, head):
    for lab in labels:
        if head == "ctc" and isinstance(lab, (set, frozenset)):
            raise ValueError("the CTC head needs sequential labels (token lists), got a tag set")
        if head != "ctc" and not isinstance(lab, (set, frozenset)):
            raise ValueError(f"the {head} head needs tag sets, got {type(lab).__name__}")


def _batches(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


def _shape_groups(features, idx):
    groups = {}
    for i in idx:
        groups.setdefault(features[i].shape, []).append(i)
    return groups.values()


def _step(model, cfg, features, labels, idx, train_mode, rng):
    """Summed per-clip loss, usable clip count and gradients over ``idx``."""
    total, used, grads = 0.0, 0, None
    groups = list(_shape_groups(features, idx))
    for group in groups:
        x = np.stack([features[i] for i in group])
        losses, g = loss_and_grads(model.params, model.config, x, [labels[i] for i in group],
                                   train_mode, rng)
        ok = np.isfinite(losses)
        total += float(losses[ok].sum())
        used += int(ok.sum())
        if len(groups) > 1:
            # loss_and_grads averages within the group; re-weight to the whole batch
            scale = len(group) / len(idx)
            g = {k: v * scale for k, v in g.items()}
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    return total, used, grads


def evaluate_loss(model, features, labels, batch_size=32):
    """Mean per-clip loss in inference mode, skipping infeasible CTC targets."""
    total, used = 0.0, 0
    for idx in _batches(list(range(len(features))), batch_size):
        for group in _shape_groups(features, idx):
            out = model_forward(np.stack([features[i] for i in group]), model.params, model.config)
            losses, _ = batch_loss(out, [labels[i] for i in group], model.config)
            ok = np.isfinite(losses)
            total += float(losses[ok].sum())
            used += int(ok.sum())
    return total / used if used else float("inf")


def split_indices(n, val_fraction, rng):
    order = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def train(dataset, n_classes, cfg=TrainConfig(), model_config=None):
    """Fit a tagger and return the best-validation model with its log.

    Parameters
    ----------
    dataset : list of (features, label)
        ``features`` is a ``(T, M)`` log-mel matrix.  ``label`` is a token
        list for the CTC head and a set of class indices otherwise.
    n_classes : int
    cfg : TrainConfig
    model_config : ModelConfig, optional
        Architecture; defaults to the standard one for ``cfg.head`` and
        ``cfg.gating``.  Its head and gating are overridden by ``cfg``.
    """
    if not dataset:
        raise EmptyDatasetError("no training clips")
    if len(dataset) < 2:
        raise EmptyDatasetError("need at least two clips to hold one out for validation")
    features = [np.asarray(f, dtype=np.float32) for f, _ in dataset]
    labels = [lab for _, lab in dataset]
    _check_labels(labels, cfg.head)
    if cfg.head == "ctc" and all(ctc.min_frames(lab) > f.shape[0] for f, lab in zip(features, labels)):
        raise AllInfeasibleError("no CTC target fits in its clip")

    n_mels = features[0].shape[1]
    if model_config is None:
        model_config = ModelConfig(n_classes, n_mels=n_mels)
    model_config = replace(model_config, n_classes=n_classes, head=cfg.head, gating=cfg.gating)

    split_rng, init_rng, shuffle_rng, drop_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    train_idx, val_idx = split_indices(len(features), cfg.val_fraction, split_rng)

    frames = np.concatenate([features[i] for i in train_idx])
    mean = frames.mean(axis=0)
    std = frames.std(axis=0) + 1e-6
    model = TrainedModel(init_params(model_config, init_rng), model_config,
                         mean.astype(np.float32), std.astype(np.float32))
    norm = [model.normalize(f) for f in features]
    val_x = [norm[i] for i in val_idx]
    val_y = [labels[i] for i in val_idx]

    optimizer = Adam(lr=cfg.lr)
    history = TrainLog()
    best_loss, best_params, stale = np.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(train_idx).tolist()
        total, used = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            batch_total, batch_used, grads = _step(model, model_config, norm, labels, idx,
                                                   True, drop_rng)
            total += batch_total
            used += batch_used
            if batch_used and not optimizer.step(model.params, grads):
                log.warning("epoch %d: non-finite gradient, update skipped", epoch)
        train_loss = total / used if used else float("inf")
        val_loss = evaluate_loss(model, val_x, val_y)
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss,
                                          time.perf_counter() - started))
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss, stale = val_loss, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            history.best_epoch = epoch
        else:
            stale += 1
            if stale > cfg.patience:
                history.stop_reason = STOP_EARLY
                break
    else:
        history.stop_reason = STOP_MAX_EPOCHS
    history.stop_epoch = history.epochs[-1].epoch
    if best_params is not None:
        model.params = best_params
    return model, history


@dataclass
class Prediction:
    """Clip-level tags, per-class scores and the frame-level trace.

    ``decode`` holds the best-path token sequence for the CTC head and is
    empty for the pooled heads.
    """

    tags: set
    scores: np.ndarray
    trace: np.ndarray
    decode: list = field(default_factory=list)


def predict_from_output(frame_probs, clip_probs, config):
    """Turn one clip's network output into a :class:`Prediction`."""
    if config.head == "ctc":
        decode = ctc.best_path_decode(frame_probs)
        bounds = frame_probs[:, :-1].reshape(len(frame_probs), config.n_classes, 2)
        scores = bounds.max(axis=(0, 2)).astype(np.float64)
        return Prediction(weak_from_sequential(decode), scores, frame_probs, decode)
    scores = np.asarray(clip_probs, dtype=np.float64)
    tags = {int(k) for k in np.flatnonzero(scores >= TAG_THRESHOLD)}
    return Prediction(tags, scores, frame_probs)


def predict_tags(features, model, batch_size=32):
    """Predict a list of clips (each ``(T, M)``, un-normalized).

    The CTC head tags every class with a start token in the best-path decode,
    so it needs no threshold; its per-class score is the highest start or end
    probability over frames.  Pooled heads tag at clip probability 0.5.
    """
    single = isinstance(features, np.ndarray) and features.ndim == 2
    clips = [features] if single else list(features)
    preds = [None] * len(clips)
    for idx in _batches(list(range(len(clips))), batch_size):
        for group in _shape_groups(clips, idx):
            x = np.stack([model.normalize(clips[i]) for i in group])
            out = model_forward(x, model.params, model.config)
            for j, i in enumerate(group):
                clip = None if out.clip_probs is None else out.clip_probs[j]
                preds[i] = predict_from_output(out.frame_probs[j].astype(np.float64), clip,
                                               model.config)
    return preds[0] if single else preds


def labels_for_head(seq_labels, head):
    """Sequential labels as-is for CTC, converted to tag sets otherwise."""
    if head == "ctc":
        return [list(s) for s in seq_labels]
    return [weak_from_sequential(s) for s in seq_labels]
