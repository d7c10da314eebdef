"""The convolutional-recurrent tagger: gated conv blocks, BGRU and a head.

Parameters live in a flat ``dict`` keyed ``"<layer>.<array>"`` so the
optimizer and checkpoint code can treat them uniformly.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import ctc
from ..errors import ShapeMismatch
from ..features import read_fmat, write_fmat
from . import layers as L

HEADS = ("ctc", "gmp", "gap")
GATINGS = ("glu", "relu")


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    head: str = "ctc"
    gating: str = "glu"
    n_mels: int = 64
    channels: tuple = (16, 32, 32)
    kernel: int = 3
    pool: int = 2
    hidden: int = 32
    dropout: float = 0.2

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.gating not in GATINGS:
            raise ValueError(f"gating must be one of {GATINGS}, got {self.gating!r}")
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.n_mels % self.pool ** len(self.channels):
            raise ValueError(f"{self.n_mels} mel bins cannot be pooled by "
                             f"{self.pool}**{len(self.channels)}")

    @property
    def output_width(self):
        """``2K + 1`` boundary tokens plus blank for CTC, ``K`` tags otherwise."""
        return 2 * self.n_classes + 1 if self.head == "ctc" else self.n_classes

    @property
    def recurrent_input(self):
        return self.channels[-1] * self.n_mels // self.pool ** len(self.channels)

    def to_dict(self):
        return asdict(self)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(cfg, rng, dtype=np.float32):
    params = {}
    k = cfg.kernel
    c_in = 1
    for i, c_out in enumerate(cfg.channels):
        shape = (c_out, c_in, k, k)
        fan_in, fan_out = c_in * k * k, c_out * k * k
        params[f"conv{i}.W"] = _glorot(rng, shape, fan_in, fan_out, dtype)
        params[f"conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        if cfg.gating == "glu":
            params[f"conv{i}.V"] = _glorot(rng, shape, fan_in, fan_out, dtype)
            params[f"conv{i}.c"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    d, h = cfg.recurrent_input, cfg.hidden
    for name in ("gru_fw", "gru_bw"):
        params[f"{name}.Wx"] = _glorot(rng, (d, 3 * h), d, 3 * h, dtype)
        params[f"{name}.Uh"] = _glorot(rng, (h, 3 * h), h, 3 * h, dtype)
        params[f"{name}.b"] = np.zeros(3 * h, dtype=dtype)
    n = cfg.output_width
    params["dense.W"] = _glorot(rng, (2 * h, n), 2 * h, n, dtype)
    params["dense.b"] = np.zeros(n, dtype=dtype)
    return params


def _gru(params, name):
    return params[f"{name}.Wx"], params[f"{name}.Uh"], params[f"{name}.b"]


@dataclass
class Output:
    """Network output for a batch.

    ``logits`` is ``(B, T, N)``.  ``frame_probs`` holds the per-frame softmax
    (CTC) or sigmoid (GMP/GAP) probabilities; ``clip_probs`` is only set for
    the pooled heads.
    """

    logits: np.ndarray
    frame_probs: np.ndarray
    clip_probs: np.ndarray = None
    cache: dict = field(default=None, repr=False)


def model_forward(features, params, cfg, train_mode=False, rng=None):
    """Run the network on ``features`` of shape ``(B, T, M)`` (or ``(T, M)``).

    Dropout is applied only when ``train_mode`` is set, using ``rng``.
    """
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[None]
    if features.ndim != 3 or features.shape[2] != cfg.n_mels:
        raise ShapeMismatch(f"expected (B, T, {cfg.n_mels}) features, got {features.shape}")
    drop_rng = rng if train_mode else None
    cache = {"blocks": []}
    x = features[:, None]
    for i in range(len(cfg.channels)):
        if cfg.gating == "glu":
            x, act = L.glu_forward(x, params[f"conv{i}.W"], params[f"conv{i}.V"],
                                   params[f"conv{i}.b"], params[f"conv{i}.c"])
        else:
            x, act = L.conv_relu_forward(x, params[f"conv{i}.W"], params[f"conv{i}.b"])
        x, pool = L.freq_max_pool_forward(x, cfg.pool)
        x, drop = L.dropout_forward(x, cfg.dropout, drop_rng)
        cache["blocks"].append((act, pool, drop))
    bsz, c, t, m = x.shape
    cache["conv_shape"] = x.shape
    seq = x.transpose(0, 2, 1, 3).reshape(bsz, t, c * m)
    seq, cache["bgru"] = L.bgru_forward(seq, _gru(params, "gru_fw"), _gru(params, "gru_bw"))
    logits, cache["dense"] = L.dense_forward(seq, params["dense.W"], params["dense.b"])
    if cfg.head == "ctc":
        return Output(logits, L.softmax(logits), cache=cache)
    frame_probs = L.sigmoid(logits)
    if cfg.head == "gmp":
        clip_probs, cache["pool"] = L.gmp_forward(frame_probs)
    else:
        clip_probs, cache["pool"] = L.gap_forward(frame_probs)
    return Output(logits, frame_probs, clip_probs, cache)


def model_backward(dlogits, out, cfg):
    """Parameter gradients given ``dloss/dlogits`` for the batch in ``out``."""
    cache = out.cache
    grads = {}
    dseq, grads["dense.W"], grads["dense.b"] = L.dense_backward(dlogits, cache["dense"])
    dseq, g_fw, g_bw = L.bgru_backward(dseq, cache["bgru"])
    for name, g in (("gru_fw", g_fw), ("gru_bw", g_bw)):
        grads[f"{name}.Wx"], grads[f"{name}.Uh"], grads[f"{name}.b"] = g
    bsz, c, t, m = cache["conv_shape"]
    dx = dseq.reshape(bsz, t, c, m).transpose(0, 2, 1, 3)
    for i in range(len(cfg.channels) - 1, -1, -1):
        act, pool, drop = cache["blocks"][i]
        dx = L.dropout_backward(dx, drop)
        dx = L.freq_max_pool_backward(dx, pool)
        need_dx = i > 0
        if cfg.gating == "glu":
            dx, *g = L.glu_backward(dx, act, need_dx)
            for key, value in zip("WVbc", g):
                grads[f"conv{i}.{key}"] = value
        else:
            dx, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = L.conv_relu_backward(dx, act, need_dx)
    return grads


def batch_loss(out, labels, cfg):
    """Per-clip losses and ``dloss/dlogits`` for the mean over usable clips.

    ``labels`` are token lists for the CTC head and class-index sets for the
    pooled heads.  Clips whose CTC target cannot fit are skipped (loss
    ``inf``, zero gradient).
    """
    bsz = out.logits.shape[0]
    losses = np.empty(bsz)
    if cfg.head == "ctc":
        dlogits = np.zeros(out.logits.shape)
        for i, target in enumerate(labels):
            losses[i], dlogits[i] = ctc.ctc_loss_grad(out.logits[i], target)
        n_ok = int(np.isfinite(losses).sum())
        if n_ok:
            dlogits /= n_ok
        return losses, dlogits.astype(out.logits.dtype)

    targets = np.zeros((bsz, cfg.n_classes), dtype=out.clip_probs.dtype)
    for i, tags in enumerate(labels):
        targets[i, sorted(tags)] = 1.0
    dclip = np.empty_like(out.clip_probs)
    for i in range(bsz):
        losses[i], dclip[i] = L.bce_loss(out.clip_probs[i], targets[i])
    dclip /= bsz
    if cfg.head == "gmp":
        dframe = L.gmp_backward(dclip, out.cache["pool"])
    else:
        dframe = L.gap_backward(dclip, out.cache["pool"])
    p = out.frame_probs
    return losses, (dframe * p * (1.0 - p)).astype(out.logits.dtype)


def loss_and_grads(params, cfg, features, labels, train_mode=False, rng=None):
    out = model_forward(features, params, cfg, train_mode, rng)
    losses, dlogits = batch_loss(out, labels, cfg)
    return losses, model_backward(dlogits, out, cfg)


class Adam:
    """Adam with bias correction; moment buffers are keyed like the params."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update ``params`` in place; returns False (no update) on non-finite grads."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1.0 - b2**self.t) / (1.0 - b1**self.t)
        for key, g in grads.items():
            p = params[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            m, v = self.m[key], self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr_t * m / (np.sqrt(v) + self.eps * np.sqrt(1.0 - b2**self.t))).astype(p.dtype)
        return True


# -- checkpoints --------------------------------------------------------------

MANIFEST = "manifest.txt"


def save_checkpoint(directory, params, cfg, extra=None):
    """Write each array as an FMAT file plus a manifest naming shapes and config.

    ``extra`` maps further array names (e.g. normalization statistics) to
    arrays stored alongside the parameters.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = dict(params)
    arrays.update(extra or {})
    lines = ["config\t" + json.dumps(cfg.to_dict(), sort_keys=True)]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        fname = name.replace(".", "_") + ".fmat"
        write_fmat(directory / fname, arr.reshape(arr.shape[0] if arr.ndim else 1, -1))
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"array\t{name}\t{fname}\t{shape}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(directory):
    """Return ``(arrays, ModelConfig)``; arrays include any ``extra`` entries."""
    directory = Path(directory)
    cfg = None
    arrays = {}
    for line in (directory / MANIFEST).read_text(encoding="utf-8").splitlines():
        kind, _, rest = line.partition("\t")
        if kind == "config":
            cfg = ModelConfig(**json.loads(rest))
        elif kind == "array":
            name, fname, shape = rest.split("\t")
            dims = tuple(int(s) for s in shape.split("x")) if shape else ()
            arrays[name] = read_fmat(directory / fname).reshape(dims)
    if cfg is None:
        raise ValueError(f"{directory / MANIFEST}: no config line")
    return arrays, cfg
