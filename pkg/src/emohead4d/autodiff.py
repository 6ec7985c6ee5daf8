"""Hand-written forward/backward passes for the small networks, Adam, and losses.

Only the handful of layers the pipeline uses are provided (affine + ReLU MLP,
single-layer GRU, L1 + D-SSIM photometric loss). Every backward is checked
against central finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import InvalidInputError


class TrainingDivergenceError(RuntimeError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


# --------------------------------------------------------------------------
# parameter store and optimiser

class ParamTape:
    """Named parameter arrays with same-shape gradient buffers."""

    def __init__(self, params=None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name, grad):
        self.grads[name] += grad

    def subset(self, prefix):
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}


@dataclass
class AdamState:
    lr: float | dict = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    frozen: set = field(default_factory=set)

    def lr_for(self, name):
        if isinstance(self.lr, dict):
            for prefix in sorted(self.lr, key=len, reverse=True):
                if name.startswith(prefix):
                    return self.lr[prefix]
            return self.lr.get("", 1e-3)
        return self.lr


def adam_step(tape: ParamTape, state: AdamState, lr_scale: float = 1.0):
    """One bias-corrected Adam update in place. Gradients are left untouched."""
    for name, g in tape.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(name)
    state.step += 1
    tape.step = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in tape.params.items():
        if name in state.frozen:
            continue
        g = tape.grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr_for(name) * lr_scale * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return tape


# --------------------------------------------------------------------------
# SSIM machinery (shared with the metrics module)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img, k):
    """Separable 'valid' correlation over the first two axes."""
    n = len(k)
    v = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ k
    return np.lib.stride_tricks.sliding_window_view(v, n, axis=1) @ k


def _filter_adjoint(grad, k):
    """Adjoint of :func:`_filter_valid` (a 'full' convolution)."""
    n = len(k)
    pad = [(n - 1, n - 1), (n - 1, n - 1)] + [(0, 0)] * (grad.ndim - 2)
    return _filter_valid(np.pad(grad, pad), k[::-1])


def ssim_map(x, y, window=None):
    """Local SSIM over the valid region; ``x``/``y`` are ``(H, W)`` or ``(H, W, C)``."""
    k = gaussian_window() if window is None else window
    if x.shape[0] < len(k) or x.shape[1] < len(k):
        raise InvalidInputError(f"image {x.shape[:2]} smaller than the {len(k)}x{len(k)} SSIM window")
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num1, num2 = 2 * mx * my + SSIM_C1, 2 * sxy + SSIM_C2
    den1, den2 = mx * mx + my * my + SSIM_C1, sxx + syy + SSIM_C2
    return (num1 * num2) / (den1 * den2), (mx, my, num1, num2, den1, den2)


def ssim_with_grad(x, y, window=None):
    """Mean SSIM and its gradient with respect to ``x``."""
    k = gaussian_window() if window is None else window
    smap, (mx, my, n1, n2, d1, d2) = ssim_map(x, y, k)
    value = smap.mean()
    gs = np.full(smap.shape, 1.0 / smap.size)
    # partials of s = n1 n2 / (d1 d2) w.r.t. the filtered moments
    g_n1 = gs * n2 / (d1 * d2)
    g_n2 = gs * n1 / (d1 * d2)
    g_d1 = -gs * smap / d1
    g_d2 = -gs * smap / d2
    g_mx = g_n1 * 2 * my + g_d1 * 2 * mx
    g_sxx = g_d2
    g_sxy = 2 * g_n2
    # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
    g_mx = g_mx - 2 * mx * g_sxx - my * g_sxy
    grad = (_filter_adjoint(g_mx, k) + 2 * x * _filter_adjoint(g_sxx, k) + y * _filter_adjoint(g_sxy, k))
    return value, grad


def photometric_loss(pred, target, lam: float = 0.2):
    """``(1 - lam) * L1 + lam * (1 - SSIM)`` and its gradient w.r.t. ``pred``.

    ``pred`` may be a :class:`RenderedFrame` or an ``(H, W, 3)`` array. L1 is
    the mean absolute error over all pixels and channels; SSIM is computed per
    channel with an 11x11 Gaussian window and averaged.
    """
    pred = np.asarray(getattr(pred, "rgb", pred), dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = (1.0 - lam) * np.abs(diff).mean()
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    if lam:
        s, gs = ssim_with_grad(pred, target)
        loss += lam * (1.0 - s)
        grad -= lam * gs
    return float(loss), grad


# --------------------------------------------------------------------------
# MLP

def init_mlp(rng, sizes, zero_last=False):
    """Kaiming-uniform weights ``[(W, b), ...]`` for layer widths ``sizes``."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-bound, bound, (fan_in, fan_out))
        b = np.zeros(fan_out)
        if zero_last and i == len(sizes) - 2:
            W = np.zeros_like(W)
        layers.append((W, b))
    return layers


def mlp_forward(layers, x):
    """ReLU hidden activations, linear output. Returns ``(out, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        if h.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
            raise InvalidInputError(f"layer {i}: input width {h.shape[-1]} vs weight {W.shape}")
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(layers, cache, grad_out):
    """Returns ``([(dW, db), ...], d_input)``."""
    grads = [None] * len(layers)
    g = np.asarray(grad_out, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (cache[i + 1] > 0.0)
        a = cache[i].reshape(-1, W.shape[0])
        gf = g.reshape(-1, W.shape[1])
        grads[i] = (a.T @ gf, gf.sum(axis=0))
        g = g @ W.T
    return grads, g


# --------------------------------------------------------------------------
# GRU

def init_gru(rng, input_dim, hidden_dim):
    bound = 1.0 / np.sqrt(hidden_dim)
    return {
        "Wx": rng.uniform(-bound, bound, (input_dim, 3 * hidden_dim)),
        "Wh": rng.uniform(-bound, bound, (hidden_dim, 3 * hidden_dim)),
        "bx": rng.uniform(-bound, bound, 3 * hidden_dim),
        "bh": rng.uniform(-bound, bound, 3 * hidden_dim),
    }


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(w, seq, h0=None):
    """Single-layer GRU over ``seq`` of shape ``(T, D)`` or ``(B, T, D)``.

    Gates follow the usual reset/update/candidate split (PyTorch ordering
    ``r, z, n`` in the packed weight columns)::

        r = sig(x Wx_r + bx_r + h Wh_r + bh_r)
        z = sig(x Wx_z + bx_z + h Wh_z + bh_z)
        n = tanh(x Wx_n + bx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """
    seq = np.asarray(seq, dtype=np.float64)
    batched = seq.ndim == 3
    if not batched:
        seq = seq[None]
    B, T, D = seq.shape
    if T < 1:
        raise InvalidInputError("GRU needs at least one time step")
    Hd = w["Wh"].shape[0]
    if w["Wx"].shape != (D, 3 * Hd) or w["Wh"].shape != (Hd, 3 * Hd):
        raise InvalidInputError(f"GRU weights {w['Wx'].shape}/{w['Wh'].shape} do not fit input width {D}")
    h = np.zeros((B, Hd)) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(B, Hd)
    xp = seq @ w["Wx"] + w["bx"]
    hs = np.empty((B, T, Hd))
    cache = []
    for t in range(T):
        hp = h @ w["Wh"] + w["bh"]
        r = _sig(xp[:, t, :Hd] + hp[:, :Hd])
        z = _sig(xp[:, t, Hd:2 * Hd] + hp[:, Hd:2 * Hd])
        n = np.tanh(xp[:, t, 2 * Hd:] + r * hp[:, 2 * Hd:])
        cache.append((h, r, z, n, hp[:, 2 * Hd:]))
        h = (1.0 - z) * n + z * h
        hs[:, t] = h
    out = hs if batched else hs[0]
    return out, (seq, cache, batched)


def gru_backward(w, cache, grad_hs):
    """Backprop through time. Returns ``(weight_grads, d_seq)``."""
    seq, steps, batched = cache
    g_hs = np.asarray(grad_hs, dtype=np.float64)
    if not batched:
        g_hs = g_hs[None]
    B, T, D = seq.shape
    Hd = w["Wh"].shape[0]
    g_xp = np.empty((B, T, 3 * Hd))
    gWh = np.zeros_like(w["Wh"])
    gbh = np.zeros_like(w["bh"])
    g_h = np.zeros((B, Hd))
    for t in range(T - 1, -1, -1):
        h_prev, r, z, n, hn = steps[t]
        g_h = g_h + g_hs[:, t]
        g_n = g_h * (1.0 - z)
        g_z = g_h * (h_prev - n)
        g_hprev = g_h * z
        g_an = g_n * (1.0 - n * n)
        g_r = g_an * hn
        g_ar = g_r * r * (1.0 - r)
        g_az = g_z * z * (1.0 - z)
        g_hp = np.concatenate([g_ar, g_az, g_an * r], axis=1)
        g_xp[:, t] = np.concatenate([g_ar, g_az, g_an], axis=1)
        gWh += h_prev.T @ g_hp
        gbh += g_hp.sum(axis=0)
        g_h = g_hprev + g_hp @ w["Wh"].T
    grads = {
        "Wx": seq.reshape(-1, D).T @ g_xp.reshape(-1, 3 * Hd),
        "bx": g_xp.sum(axis=(0, 1)),
        "Wh": gWh,
        "bh": gbh,
    }
    g_seq = g_xp @ w["Wx"].T
    return grads, (g_seq if batched else g_seq[0])
