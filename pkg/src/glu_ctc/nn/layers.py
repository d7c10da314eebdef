"""Differentiable layers with hand-written backward passes.

Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` takes the upstream gradient and that cache.  Convolutional
tensors are laid out ``(batch, channels, time, freq)``; sequences are
``(batch, time, features)``.
"""

import numpy as np

from ..errors import NotDivisibleError, ShapeMismatch


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- convolution -------------------------------------------------------------

def _im2col(x, kh, kw):
    # rows are (channel, ki, kj), columns (batch, time, freq): inner copies stay contiguous
    b, c, t, m = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * t * m)


def conv2d_same_forward(x, w, b):
    """Zero-padded 'same' convolution over time and frequency.

    ``x`` is ``(B, C, T, M)``, ``w`` is ``(C_out, C, kh, kw)`` with odd
    kernel sides and ``b`` is ``(C_out,)``.  Output is ``(B, C_out, T, M)``.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv input {x.shape}, filters {w.shape}, bias {b.shape}")
    c_out, _, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"kernel must be odd-sized, got {kh}x{kw}")
    bsz, _, t, m = x.shape
    cols = _im2col(x, kh, kw)
    y = w.reshape(c_out, -1) @ cols + b[:, None]
    y = y.reshape(c_out, bsz, t, m).transpose(1, 0, 2, 3)
    return y, (cols, x.shape, w)


def conv2d_same_backward(dy, cache, need_dx=True):
    """Gradients ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false.

    With unit stride and symmetric padding, ``dx`` is the 'same' convolution
    of ``dy`` with the kernel flipped in both axes and its channel axes swapped.
    """
    cols, x_shape, w = cache
    c_out = w.shape[0]
    dyf = dy.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dw = (dyf @ cols.T).reshape(w.shape)
    db = dyf.sum(axis=1)
    if not need_dx:
        return None, dw, db
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_same_forward(dy, w_flip, np.zeros(w.shape[1], dtype=dy.dtype))
    return dx, dw, db


# -- gated linear unit and its ReLU stand-in --------------------------------

def glu_forward(x, w, v, b, c):
    """``(W * x + b) * sigmoid(V * x + c)`` with both convolutions 'same'-padded."""
    if w.shape != v.shape or b.shape != c.shape:
        raise ShapeMismatch(f"GLU filters {w.shape} vs {v.shape}, biases {b.shape} vs {c.shape}")
    out, conv_cache = conv2d_same_forward(x, np.concatenate([w, v]), np.concatenate([b, c]))
    n = w.shape[0]
    linear, gate = out[:, :n], sigmoid(out[:, n:])
    return linear * gate, (conv_cache, linear, gate)


def glu_backward(dy, cache, need_dx=True):
    """Gradients ``(dx, dW, dV, db, dc)``."""
    conv_cache, linear, gate = cache
    d_linear = dy * gate
    d_gate = dy * linear * gate * (1.0 - gate)
    dx, dwv, dbc = conv2d_same_backward(np.concatenate([d_linear, d_gate], axis=1),
                                        conv_cache, need_dx)
    n = linear.shape[1]
    return dx, dwv[:n], dwv[n:], dbc[:n], dbc[n:]


def conv_relu_forward(x, w, b):
    out, conv_cache = conv2d_same_forward(x, w, b)
    return np.maximum(out, 0), (conv_cache, out > 0)


def conv_relu_backward(dy, cache, need_dx=True):
    conv_cache, active = cache
    return conv2d_same_backward(dy * active, conv_cache, need_dx)


# -- pooling and dropout ------------------------------------------------------

def freq_max_pool_forward(x, factor):
    """Max over groups of ``factor`` adjacent frequency bins; time is untouched."""
    bsz, c, t, m = x.shape
    if m % factor:
        raise NotDivisibleError(f"{m} frequency bins not divisible by {factor}")
    out = x[..., 0::factor]
    idx = np.zeros(out.shape, dtype=np.int8)
    for k in range(1, factor):
        cand = x[..., k::factor]
        better = cand > out
        out = np.where(better, cand, out)
        idx[better] = k
    return out, (idx, factor)


def freq_max_pool_backward(dy, cache):
    """Route each gradient to the first maximal bin of its group."""
    idx, factor = cache
    bsz, c, t, m_out = dy.shape
    dx = np.zeros((bsz, c, t, m_out * factor), dtype=dy.dtype)
    for k in range(factor):
        dx[..., k::factor] = np.where(idx == k, dy, 0)
    return dx


def dropout_forward(x, rate, rng):
    """Inverted dropout; pass ``rng=None`` (inference) to disable it."""
    if rng is None or rate <= 0:
        return x, None
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dy, cache):
    return dy if cache is None else dy * cache


# -- recurrent ----------------------------------------------------------------

def gru_forward(x, wx, uh, b):
    """Single-direction GRU over ``x`` of shape ``(B, T, D)``.

    Gate columns are ordered update, reset, candidate::

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + (r * h) Un + bn)
        h' = (1 - z) * h + z * n
    """
    bsz, t_len, _ = x.shape
    hid = uh.shape[0]
    if wx.shape[1] != 3 * hid or uh.shape != (hid, 3 * hid) or b.shape != (3 * hid,):
        raise ShapeMismatch(f"GRU weights {wx.shape}, {uh.shape}, {b.shape}")
    xw = x @ wx + b
    u_zr, u_n = uh[:, :2 * hid], uh[:, 2 * hid:]
    h = np.zeros((bsz, hid), dtype=x.dtype)
    hs = np.empty((bsz, t_len + 1, hid), dtype=x.dtype)
    hs[:, 0] = h
    zs = np.empty((bsz, t_len, hid), dtype=x.dtype)
    rs = np.empty_like(zs)
    ns = np.empty_like(zs)
    for t in range(t_len):
        zr = sigmoid(xw[:, t, :2 * hid] + h @ u_zr)
        z, r = zr[:, :hid], zr[:, hid:]
        n = np.tanh(xw[:, t, 2 * hid:] + (r * h) @ u_n)
        h = h + z * (n - h)
        zs[:, t], rs[:, t], ns[:, t], hs[:, t + 1] = z, r, n, h
    return hs[:, 1:], (x, wx, uh, hs, zs, rs, ns)


def gru_backward(dy, cache):
    """Backpropagation through time; returns ``(dx, dWx, dUh, db)``."""
    x, wx, uh, hs, zs, rs, ns = cache
    bsz, t_len, _ = x.shape
    hid = uh.shape[0]
    u_zr, u_n = uh[:, :2 * hid], uh[:, 2 * hid:]
    dxw = np.empty((bsz, t_len, 3 * hid), dtype=dy.dtype)
    duh = np.zeros_like(uh)
    dh_next = np.zeros((bsz, hid), dtype=dy.dtype)
    for t in range(t_len - 1, -1, -1):
        h_prev, z, r, n = hs[:, t], zs[:, t], rs[:, t], ns[:, t]
        dh = dy[:, t] + dh_next
        dn_pre = dh * z * (1.0 - n * n)
        dz_pre = dh * (n - h_prev) * z * (1.0 - z)
        duh[:, 2 * hid:] += (r * h_prev).T @ dn_pre
        drh = dn_pre @ u_n.T
        dr_pre = drh * h_prev * r * (1.0 - r)
        dzr = np.concatenate([dz_pre, dr_pre], axis=1)
        duh[:, :2 * hid] += h_prev.T @ dzr
        dh_next = dh * (1.0 - z) + drh * r + dzr @ u_zr.T
        dxw[:, t, :2 * hid] = dzr
        dxw[:, t, 2 * hid:] = dn_pre
    flat = dxw.reshape(-1, 3 * hid)
    dwx = x.reshape(-1, x.shape[2]).T @ flat
    return dxw @ wx.T, dwx, duh, flat.sum(axis=0)


def bgru_forward(x, fw, bw):
    """Bidirectional GRU; ``fw`` and ``bw`` are ``(Wx, Uh, b)`` triples.

    Output is ``(B, T, 2H)``: forward states then time-aligned backward states.
    """
    h_fw, c_fw = gru_forward(x, *fw)
    h_bw, c_bw = gru_forward(x[:, ::-1], *bw)
    return np.concatenate([h_fw, h_bw[:, ::-1]], axis=2), (c_fw, c_bw, h_fw.shape[2])


def bgru_backward(dy, cache):
    """Returns ``(dx, (dWx, dUh, db) forward, (dWx, dUh, db) backward)``."""
    c_fw, c_bw, hid = cache
    dx_fw, *g_fw = gru_backward(dy[:, :, :hid], c_fw)
    dx_bw, *g_bw = gru_backward(np.ascontiguousarray(dy[:, ::-1, hid:]), c_bw)
    return dx_fw + dx_bw[:, ::-1], tuple(g_fw), tuple(g_bw)


# -- output heads -------------------------------------------------------------

def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dy, cache):
    x, w = cache
    flat = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x.reshape(-1, x.shape[-1]).T @ flat, flat.sum(axis=0)


def softmax(logits):
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def gmp_forward(frame_probs):
    """Global max over time: ``(B, T, K) -> (B, K)``."""
    idx = frame_probs.argmax(axis=1)[:, None]
    return np.take_along_axis(frame_probs, idx, axis=1)[:, 0], (idx, frame_probs.shape)


def gmp_backward(dy, cache):
    idx, shape = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, idx, dy[:, None], axis=1)
    return dx


def gap_forward(frame_probs):
    """Global average over time: ``(B, T, K) -> (B, K)``."""
    return frame_probs.mean(axis=1), frame_probs.shape


def gap_backward(dy, shape):
    return np.broadcast_to(dy[:, None] / shape[1], shape).copy()


BCE_EPS = 1e-7


def bce_loss(pred, target, eps=BCE_EPS):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    Predictions are clipped to ``[eps, 1 - eps]``; the gradient is zero where
    clipping is active.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    p = np.clip(pred, eps, 1.0 - eps)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p)) / pred.size
    grad[(pred < eps) | (pred > 1.0 - eps)] = 0.0
    return float(loss), grad
