"""Composite mapping loss (color + depth + SSIM + scale regularization) and
joint adaptive-moment optimization of the dense and sparse gaussian maps.

All gradients are analytic; the SSIM backward pass mirrors the windowed
forward formula term by term so the loss can drive the splatting renderer's
reverse mode without numeric differentiation.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import GaussianMap, Keyframe, RgbdFrame
from .errors import NumericalError
from .renderer import (
    RenderAdjoint,
    RenderConfig,
    RenderOutput,
    render_arrays,
    render_with_gradients_arrays,
)

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-tap window
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2

_KERNEL = None


def _kernel() -> np.ndarray:
    global _KERNEL
    if _KERNEL is None:
        x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
        k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
        _KERNEL = k / k.sum()
    return _KERNEL


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation along both image axes."""
    rows = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(rows, k.size, axis=1) @ k


def _spread(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Adjoint of _filter_valid: scatter window-space gradients to pixels."""
    pad = k.size - 1
    return _filter_valid(np.pad(g, ((pad, pad), (pad, pad))), k)


def _ssim_channel(x, y, g_s=None):
    """Window SSIM map for one channel; optionally its pixel adjoint.

    g_s is d(loss)/d(S) per window; the backward chains through the window
    means (ux), raw second moments (mxx, mxy), and their spreads.
    """
    k = _kernel()
    ux = _filter_valid(x, k)
    uy = _filter_valid(y, k)
    mxx = _filter_valid(x * x, k)
    myy = _filter_valid(y * y, k)
    mxy = _filter_valid(x * y, k)
    vx = mxx - ux**2
    vy = myy - uy**2
    vxy = mxy - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux**2 + uy**2 + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    if g_s is None:
        return s, None
    g_a1 = g_s * a2 / (b1 * b2)
    g_a2 = g_s * a1 / (b1 * b2)
    g_b1 = -g_s * s / b1
    g_b2 = -g_s * s / b2
    g_ux = 2.0 * (uy * g_a1 + ux * g_b1 - ux * g_b2 - uy * g_a2)
    g_x = _spread(g_ux, k) + 2.0 * x * _spread(g_b2, k) + y * _spread(2.0 * g_a2, k)
    return s, g_x


def _as_channels(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity: 11x11 gaussian window (sigma 1.5),
    k1=0.01, k2=0.03, dynamic range 1, averaged over windows and channels."""
    val, _ = ssim_with_gradient(a, b, need_gradient=False)
    return val


def ssim_with_gradient(a: np.ndarray, b: np.ndarray, need_gradient: bool = True):
    """(ssim, d ssim / d a); the gradient matches a's shape."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"image dimensions differ: {np.shape(a)} vs {np.shape(b)}")
    ac, bc = _as_channels(a), _as_channels(b)
    h, w, nchan = ac.shape
    size = 2 * SSIM_RADIUS + 1
    if h < size or w < size:
        raise ValueError(f"images must be at least {size}x{size}")
    n_windows = (h - size + 1) * (w - size + 1)
    g_s = 1.0 / (n_windows * nchan) if need_gradient else None
    total = 0.0
    grad = np.zeros_like(ac) if need_gradient else None
    for c in range(nchan):
        s, g = _ssim_channel(ac[:, :, c], bc[:, :, c], g_s)
        total += float(s.mean())
        if need_gradient:
            grad[:, :, c] = g
    if need_gradient and np.asarray(a).ndim == 2:
        grad = grad[:, :, 0]
    return total / nchan, grad


def regularization_loss(scales: np.ndarray, epsilon: float = 1e-4) -> float:
    """Anisotropy penalty: mean L1 pull of first-two scale entries toward
    their shared batch mean, plus mean L1 pull of third entries toward a
    near-zero floor (keeps gaussians disc-like and mutually consistent)."""
    loss, _ = regularization_with_gradient(scales, epsilon, need_gradient=False)
    return loss


def regularization_with_gradient(scales, epsilon: float = 1e-4,
                                 need_gradient: bool = True):
    s = np.atleast_2d(np.asarray(scales, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty scale batch")
    n = s.shape[0]
    tang = s[:, :2]
    mean = tang.mean()
    loss = float(np.abs(tang - mean).sum() / n + np.abs(s[:, 2] - epsilon).sum() / n)
    if not need_gradient:
        return loss, None
    sign_t = np.sign(tang - mean)
    grad = np.zeros_like(s)
    grad[:, :2] = (sign_t - sign_t.sum() / (2.0 * n)) / n
    grad[:, 2] = np.sign(s[:, 2] - epsilon) / n
    return loss, grad


@dataclass
class LossWeights:
    color: float = 0.8  # lambda_i; the SSIM term gets 1 - lambda_i
    depth: float = 0.5  # lambda_d
    reg: float = 0.01  # lambda_r

    def __post_init__(self):
        if not (0.0 <= self.color <= 1.0 and 0.0 <= self.depth <= 1.0):
            raise ValueError("loss weights must lie in [0, 1]")
        if self.reg < 0.0:
            raise ValueError("regularization weight must be non-negative")


def mapping_loss(render: RenderOutput, frame: RgbdFrame, map_scales,
                 weights: LossWeights | None = None, epsilon: float = 1e-4):
    """Weighted L1 color + masked L1 depth + (1 - SSIM) + scale regularizer.

    Returns (total, parts, RenderAdjoint, d total / d map_scales); the parts
    dict holds the weighted contributions so they sum to the total.
    """
    w = weights or LossWeights()
    if render.color.shape != frame.color_image.shape:
        raise ValueError("render / frame dimensions differ")

    diff_c = render.color - frame.color_image
    color_l1 = float(np.abs(diff_c).mean())
    g_color = (w.color / diff_c.size) * np.sign(diff_c)

    valid = frame.depth_image > 0
    g_depth = np.zeros_like(render.depth)
    depth_l1 = 0.0
    n_valid = int(valid.sum())
    if n_valid and w.depth > 0.0:
        diff_d = render.depth - frame.depth_image
        depth_l1 = float(np.abs(diff_d[valid]).mean())
        g_depth[valid] = (w.depth / n_valid) * np.sign(diff_d[valid])

    ssim_val = 1.0
    if w.color < 1.0:
        ssim_val, g_ssim = ssim_with_gradient(render.color, frame.color_image)
        g_color -= (1.0 - w.color) * g_ssim

    scales = np.atleast_2d(np.asarray(map_scales, dtype=np.float64)) \
        if map_scales is not None else np.zeros((0, 3))
    if scales.size and w.reg > 0.0:
        reg_val, g_reg = regularization_with_gradient(scales, epsilon)
        g_scales = w.reg * g_reg
    else:
        reg_val = 0.0
        g_scales = np.zeros_like(scales)

    parts = {
        "color": w.color * color_l1,
        "depth": w.depth * depth_l1,
        "ssim": (1.0 - w.color) * (1.0 - ssim_val),
        "reg": w.reg * reg_val,
    }
    total = sum(parts.values())
    return total, parts, RenderAdjoint(color=g_color, depth=g_depth), g_scales


@dataclass
class OptimizeConfig:
    lr_position: float = 1e-4  # multiplied by the dense-map extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.2  # logit-space; spawns must reach ~1 in few steps
    lr_color: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    scale_epsilon: float = 1e-4  # regularizer target for the third scale
    opacity_clip: float = 1e-4  # logit-parameterization guard band
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)


class OptimizerState:
    """Adaptive-moment accumulators keyed by parameter-group name."""

    def __init__(self, beta1: float, beta2: float, eps: float):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.groups: dict = {}

    def step(self, name: str, lr: float, param: np.ndarray,
             grad: np.ndarray) -> np.ndarray:
        m, v, t = self.groups.get(name, (np.zeros_like(param),
                                         np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad**2
        self.groups[name] = (m, v, t)
        m_hat = m / (1.0 - self.beta1**t)
        v_hat = v / (1.0 - self.beta2**t)
        return param - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _scene_extent(dense: GaussianMap) -> float:
    if len(dense) == 0:
        return 1.0
    span = dense.mu.max(axis=0) - dense.mu.min(axis=0)
    return max(float(np.linalg.norm(span)), 1.0)


def _logit(p: np.ndarray, clip: float) -> np.ndarray:
    p = np.clip(p, clip, 1.0 - clip)
    return np.log(p / (1.0 - p))


def optimize_maps(dense: GaussianMap, sparse: GaussianMap,
                  covisible: list, randoms: list, iterations: int,
                  cfg: OptimizeConfig | None = None, lock=None):
    """Jointly refine both maps against the selected keyframes.

    Each iteration renders the union of the maps from one keyframe (covisible
    keyframes are visited twice per round-robin cycle, realizing the
    local-emphasis schedule), backpropagates the composite loss, and applies
    one adaptive-moment step per attribute group. Sparse-map geometry
    (position, scale, rotation) stays frozen for tracking stability; its
    opacity and color do update. Returns rows of
    (iteration, keyframe_index, total, color, depth, ssim, reg).
    """
    cfg = cfg or OptimizeConfig()
    # Newest co-visible first, with one random view slotted right after it:
    # with a small iteration budget the steps land on the current keyframe's
    # fresh spawns first, then refresh an older region before the neighbours.
    local = sorted(covisible, key=lambda kf: kf.index, reverse=True)
    randoms = list(randoms)
    schedule = local[:1] + randoms[:1] + local[1:] + randoms[1:] + local
    trace: list = []
    if iterations <= 0 or not schedule or len(dense) + len(sparse) == 0:
        return trace

    lr_pos = cfg.lr_position * _scene_extent(dense)
    opt = OptimizerState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    nd = len(dense)

    for it in range(iterations):
        kf: Keyframe = schedule[it % len(schedule)]
        mu = np.concatenate([dense.mu, sparse.mu])
        scale = np.concatenate([dense.scale, sparse.scale])
        rotation = np.concatenate([dense.rotation, sparse.rotation])
        opacity = np.concatenate([dense.opacity, sparse.opacity])
        color = np.concatenate([dense.color, sparse.color])

        # forward pass for the loss, then the fused forward/backward pass
        # with the resulting adjoint images
        out = render_arrays(mu, scale, rotation, opacity, color, kf.pose,
                            kf.frame.intrinsics, cfg.render)
        total, parts, adjoint, g_scales_reg = mapping_loss(
            out, kf.frame, dense.scale, cfg.weights, cfg.scale_epsilon,
        )
        if not np.isfinite(total):
            err = NumericalError(f"non-finite mapping loss at iteration {it}")
            err.trace = trace
            raise err
        trace.append((it, kf.index, total, parts["color"], parts["depth"],
                      parts["ssim"], parts["reg"]))
        _, grads = render_with_gradients_arrays(
            mu, scale, rotation, opacity, color, kf.pose,
            kf.frame.intrinsics, adjoint, cfg.render,
        )

        new_attrs = _apply_updates(dense, sparse, nd, grads, g_scales_reg,
                                   opt, cfg, lr_pos)
        if lock is not None:
            with lock:
                _commit(dense, sparse, new_attrs)
        else:
            _commit(dense, sparse, new_attrs)
    return trace


def _apply_updates(dense, sparse, nd, grads, g_scales_reg, opt, cfg, lr_pos):
    clip = cfg.opacity_clip
    updates = {}
    if nd:
        g_scale = grads.scale[:nd] + g_scales_reg
        log_scale = opt.step("dense.scale", cfg.lr_scale, np.log(dense.scale),
                             g_scale * dense.scale)
        op = np.clip(dense.opacity, clip, 1.0 - clip)
        logit = opt.step("dense.opacity", cfg.lr_opacity, _logit(op, clip),
                         grads.opacity[:nd] * op * (1.0 - op))
        rot = opt.step("dense.rotation", cfg.lr_rotation, dense.rotation,
                       grads.rotation[:nd])
        updates["dense"] = {
            "mu": opt.step("dense.mu", lr_pos, dense.mu, grads.mu[:nd]),
            "scale": np.exp(log_scale),
            "rotation": rot / np.linalg.norm(rot, axis=1, keepdims=True),
            "opacity": 1.0 / (1.0 + np.exp(-logit)),
            "color": np.clip(opt.step("dense.color", cfg.lr_color, dense.color,
                                      grads.color[:nd]), 0.0, 1.0),
        }
    if len(sparse):
        op = np.clip(sparse.opacity, clip, 1.0 - clip)
        logit = opt.step("sparse.opacity", cfg.lr_opacity, _logit(op, clip),
                         grads.opacity[nd:] * op * (1.0 - op))
        updates["sparse"] = {
            "opacity": 1.0 / (1.0 + np.exp(-logit)),
            "color": np.clip(opt.step("sparse.color", cfg.lr_color, sparse.color,
                                      grads.color[nd:]), 0.0, 1.0),
        }
    return updates


def _commit(dense, sparse, updates):
    for name, attrs in updates.items():
        target = dense if name == "dense" else sparse
        for attr, value in attrs.items():
            getattr(target, attr)[:] = value
