"""Two-label CRF refinement with truncated-window mean-field inference.

The energy is ``sum_i psi_u(x_i) + sum_{i<j} k(f_i, f_j) [x_i != x_j]`` with
the pair sum restricted to pixels within ``window // 2`` of each other
(Chebyshev distance). Each unordered pair is counted once, which is the
energy whose mean-field fixed point is the update used here.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .base import check_image, check_same_shape

EPS = 1e-6


@dataclass
class CrfParams:
    w_appearance: float = 3.0
    w_smoothness: float = 1.0
    theta_alpha: float = 13.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    window: int = 11
    iters: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")


def unary_from_scores(scores):
    """Negative log-probabilities ``(H, W, 2)`` for labels (0, 1)."""
    s = np.clip(np.asarray(scores, dtype=np.float64), EPS, 1.0 - EPS)
    return np.stack([-np.log1p(-s), -np.log(s)], axis=-1)


def pairwise_kernel(pos_i, pos_j, color_i, color_j, params):
    """Appearance plus smoothness Gaussian kernel between two pixels."""
    dp = np.sum((np.asarray(pos_i, float) - np.asarray(pos_j, float)) ** 2, axis=-1)
    dc = np.sum((np.asarray(color_i, float) - np.asarray(color_j, float)) ** 2, axis=-1)
    return (params.w_appearance * np.exp(-dp / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
            + params.w_smoothness * np.exp(-dp / (2 * params.theta_gamma ** 2)))


def _colors(image, shape):
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[:2] != shape:
        raise ValueError(f"image shape {img.shape[:2]} does not match scores {shape}")
    return img.astype(np.float64)


def _window_kernels(colors, params):
    """Yield ``(dy, dx, k)`` where ``k[y, x]`` couples pixel ``(y, x)`` with
    ``(y + dy, x + dx)`` and is zero where that neighbour is off the grid."""
    h, w = colors.shape[:2]
    r = params.window // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            k = np.zeros((h, w))
            ys, ye = max(0, -dy), min(h, h - dy)
            xs, xe = max(0, -dx), min(w, w - dx)
            if ys >= ye or xs >= xe:
                continue
            a = colors[ys:ye, xs:xe]
            b = colors[ys + dy:ye + dy, xs + dx:xe + dx]
            dp = float(dy * dy + dx * dx)
            dc = np.sum((a - b) ** 2, axis=-1)
            k[ys:ye, xs:xe] = (
                params.w_appearance * np.exp(-dp / (2 * params.theta_alpha ** 2) - dc / (2 * params.theta_beta ** 2))
                + params.w_smoothness * np.exp(-dp / (2 * params.theta_gamma ** 2))
            )
            yield dy, dx, k


def _shift(q, dy, dx):
    """``out[y, x] = q[y + dy, x + dx]`` with zeros off the grid."""
    h, w = q.shape
    out = np.zeros_like(q)
    ys, ye = max(0, -dy), min(h, h - dy)
    xs, xe = max(0, -dx), min(w, w - dx)
    if ys < ye and xs < xe:
        out[ys:ye, xs:xe] = q[ys + dy:ye + dy, xs + dx:xe + dx]
    return out


def _softmin(energy):
    z = -energy
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def meanfield_infer(unary, image, params=None, return_history=False):
    """Synchronous mean-field updates; returns marginals ``Q`` of shape (H, W, 2).

    ``Q`` starts at the normalised unary distribution. Each sweep sets
    ``Q_i(l) ~ exp(-psi_u(l) - sum_j k_ij Q_j(1 - l))`` over window neighbours.
    """
    params = params if params is not None else CrfParams()
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 3 or unary.shape[2] != 2:
        raise ValueError(f"unary must have shape (H, W, 2), got {unary.shape}")
    colors = _colors(image, unary.shape[:2])
    q = _softmin(unary)
    history = [q]
    if params.w_appearance == 0 and params.w_smoothness == 0:
        return (q, history) if return_history else q
    kernels = list(_window_kernels(colors, params))
    for it in range(params.iters):
        msg1 = np.zeros(unary.shape[:2])  # cost of label 1: neighbours labelled 0
        msg0 = np.zeros(unary.shape[:2])
        for dy, dx, k in kernels:
            msg1 += k * _shift(q[..., 0], dy, dx)
            msg0 += k * _shift(q[..., 1], dy, dx)
        energy = unary + np.stack([msg0, msg1], axis=-1)
        if not np.all(np.isfinite(energy)):
            raise FloatingPointError(f"non-finite mean-field energy at iteration {it}")
        q = _softmin(energy)
        history.append(q)
    return (q, history) if return_history else q


def map_labels(q):
    """Per-pixel argmax of the marginals; exact ties go to label 0."""
    q = np.asarray(q)
    return q[..., 1] > q[..., 0]


def energy(labels, unary, image, params):
    """CRF energy of a labelling (unordered window pairs counted once)."""
    labels = np.asarray(labels).astype(np.int64)
    unary = np.asarray(unary, dtype=np.float64)
    check_same_shape(labels, unary[..., 0], names=("labels", "unary"))
    colors = _colors(image, labels.shape)
    e = float(np.take_along_axis(unary, labels[..., None], axis=-1).sum())
    for dy, dx, k in _window_kernels(colors, params):
        if (dy, dx) <= (0, 0):
            continue
        differ = labels != _shift(labels, dy, dx)
        valid = _shift(np.ones_like(labels), dy, dx).astype(bool)
        e += float(k[differ & valid].sum())
    return e


def exact_infer_bruteforce(unary, image, params, max_pixels=20):
    """Exact Gibbs marginals and MAP labelling by enumerating all labellings."""
    unary = np.asarray(unary, dtype=np.float64)
    h, w = unary.shape[:2]
    n = h * w
    if n > max_pixels:
        raise ValueError(f"{n} pixels exceed the enumeration limit of {max_pixels}")
    colors = _colors(image, (h, w))
    pos = np.stack(np.mgrid[:h, :w], axis=-1).reshape(n, 2).astype(np.float64)
    col = colors.reshape(n, -1)
    u = unary.reshape(n, 2)
    r = params.window // 2
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if np.max(np.abs(pos[i] - pos[j])) <= r:
                pairs.append((i, j, float(pairwise_kernel(pos[i], pos[j], col[i], col[j], params))))
    states = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    energies = u[np.arange(n), states].sum(axis=1)
    for i, j, k in pairs:
        energies = energies + k * (states[:, i] != states[:, j])
    logp = -(energies - energies.min())
    p = np.exp(logp)
    p /= p.sum()
    marg1 = (p[:, None] * states).sum(axis=0)
    marginals = np.stack([1 - marg1, marg1], axis=-1).reshape(h, w, 2)
    best = states[int(np.argmin(energies))].reshape(h, w).astype(bool)
    return marginals, best, energies, states


def refine(scores, image, params=None):
    """Scores in (0, 1) -> refined boolean mask."""
    image = check_image(image) if np.asarray(image).ndim == 3 else image
    q = meanfield_infer(unary_from_scores(scores), image, params)
    return map_labels(q)
