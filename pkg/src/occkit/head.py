"""Desk-scale differentiable occupancy head.

A two-layer MLP decodes each BEV query cell into a column of voxel
features; a three-level 3D UNet (3x3x3 conv + tanh, 2x average-pool
encoder at downscales {2, 4, 8}, nearest-neighbor upsampling with skip
concatenation on the way back) refines the volume; a per-voxel linear
classifier produces logits; training combines cross-entropy and soft dice.

Everything runs in float64 with tanh activations so analytic gradients can
be verified against central finite differences to ~1e-6 headroom. The
backward pass is hand-rolled reverse-mode accumulation; no autograd
framework is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError, ValidationError
from .grid import LabelGrid, VoxelMask

DICE_EPS = 1e-5


@dataclass(frozen=True)
class BevQueryGrid:
    """BEV feature map shaped (h, w, c), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"BEV queries must be (h, w, c) with dims >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class VoxelFeatureVolume:
    """Dense voxel features shaped (h, w, z, ch), float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 4 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"voxel volume must be (h, w, z, ch) with dims >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class HeadConfig:
    """Shape bookkeeping used to initialize HeadParams.

    dec_channels[-1] is the classifier's input width; voxel_channels
    defaults to a single feature per voxel out of the MLP.
    """

    bev_c: int
    hidden: int
    depth: int
    voxel_channels: int = 1
    enc_channels: Tuple[int, int, int] = (4, 4, 4)
    dec_channels: Tuple[int, int, int] = (4, 4, 4)
    num_classes: int = 18
    loss_weights: Tuple[float, float] = (1.0, 1.0)


@dataclass
class HeadParams:
    """Every tensor of the head plus the loss mixing weights.

    MLP: w1 (hidden, c), b1 (hidden,), w2 (depth * voxel_channels, hidden),
    b2 matching. Encoder kernels are (out_ch, in_ch, 3, 3, 3); decoder
    kernels consume the concatenation [upsampled, skip]. The classifier is
    a per-voxel linear map (num_classes, dec_channels[-1]).
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    depth: int
    voxel_channels: int
    enc_kernels: List[np.ndarray]
    enc_biases: List[np.ndarray]
    dec_kernels: List[np.ndarray]
    dec_biases: List[np.ndarray]
    w_cls: np.ndarray
    b_cls: np.ndarray
    loss_weights: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "w_cls", "b_cls"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        self.enc_kernels = [np.ascontiguousarray(k, dtype=np.float64) for k in self.enc_kernels]
        self.enc_biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.enc_biases]
        self.dec_kernels = [np.ascontiguousarray(k, dtype=np.float64) for k in self.dec_kernels]
        self.dec_biases = [np.ascontiguousarray(b, dtype=np.float64) for b in self.dec_biases]
        self._validate()

    def _validate(self):
        lam_ce, lam_dice = self.loss_weights
        if lam_ce < 0 or lam_dice < 0 or (lam_ce == 0 and lam_dice == 0):
            raise ValidationError(
                f"loss weights must be >= 0 and not both zero, got {self.loss_weights}"
            )
        if self.w1.ndim != 2 or self.b1.shape != (self.w1.shape[0],):
            raise ShapeError("mlp first layer shapes inconsistent")
        if self.w2.shape != (self.depth * self.voxel_channels, self.w1.shape[0]):
            raise ShapeError(
                f"w2 must be ({self.depth * self.voxel_channels}, {self.w1.shape[0]}), "
                f"got {self.w2.shape}"
            )
        if self.b2.shape != (self.w2.shape[0],):
            raise ShapeError("b2 shape inconsistent with w2")
        if len(self.enc_kernels) != 3 or len(self.dec_kernels) != 3:
            raise ShapeError("the UNet has exactly three encoder and three decoder stages")
        in_ch = self.voxel_channels
        for i, (k, b) in enumerate(zip(self.enc_kernels, self.enc_biases)):
            if k.ndim != 5 or k.shape[1:] != (in_ch, 3, 3, 3):
                raise ShapeError(f"enc kernel {i} must be (out, {in_ch}, 3, 3, 3), got {k.shape}")
            if b.shape != (k.shape[0],):
                raise ShapeError(f"enc bias {i} shape mismatch")
            in_ch = k.shape[0]
        enc_out = [k.shape[0] for k in self.enc_kernels]
        # decoder stage i upsamples the running feature and concatenates the
        # encoder activation at the same scale (skips in reverse order)
        up_ch = enc_out[2]
        for i, (k, b) in enumerate(zip(self.dec_kernels, self.dec_biases)):
            skip_ch = enc_out[2 - i]
            if k.ndim != 5 or k.shape[1:] != (up_ch + skip_ch, 3, 3, 3):
                raise ShapeError(
                    f"dec kernel {i} must be (out, {up_ch + skip_ch}, 3, 3, 3), got {k.shape}"
                )
            if b.shape != (k.shape[0],):
                raise ShapeError(f"dec bias {i} shape mismatch")
            up_ch = k.shape[0]
        if self.w_cls.ndim != 2 or self.w_cls.shape[1] != up_ch:
            raise ShapeError(
                f"classifier weight must be (num_classes, {up_ch}), got {self.w_cls.shape}"
            )
        if self.b_cls.shape != (self.w_cls.shape[0],):
            raise ShapeError("classifier bias shape mismatch")

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[0]


def init_head_params(cfg: HeadConfig, rng: np.random.Generator) -> HeadParams:
    """Random head with 1/sqrt(fan_in)-scaled weights and small biases."""
    def w(shape, fan_in):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

    e1, e2, e3 = cfg.enc_channels
    d3, d2, d1 = cfg.dec_channels
    out_dim = cfg.depth * cfg.voxel_channels
    return HeadParams(
        w1=w((cfg.hidden, cfg.bev_c), cfg.bev_c),
        b1=0.1 * rng.normal(size=cfg.hidden),
        w2=w((out_dim, cfg.hidden), cfg.hidden),
        b2=0.1 * rng.normal(size=out_dim),
        depth=cfg.depth,
        voxel_channels=cfg.voxel_channels,
        enc_kernels=[
            w((e1, cfg.voxel_channels, 3, 3, 3), cfg.voxel_channels * 27),
            w((e2, e1, 3, 3, 3), e1 * 27),
            w((e3, e2, 3, 3, 3), e2 * 27),
        ],
        enc_biases=[0.1 * rng.normal(size=c) for c in (e1, e2, e3)],
        dec_kernels=[
            w((d3, e3 + e3, 3, 3, 3), (e3 + e3) * 27),
            w((d2, d3 + e2, 3, 3, 3), (d3 + e2) * 27),
            w((d1, d2 + e1, 3, 3, 3), (d2 + e1) * 27),
        ],
        dec_biases=[0.1 * rng.normal(size=c) for c in (d3, d2, d1)],
        w_cls=w((cfg.num_classes, d1), d1),
        b_cls=0.1 * rng.normal(size=cfg.num_classes),
        loss_weights=cfg.loss_weights,
    )


def named_parameters(params: HeadParams) -> List[Tuple[str, np.ndarray]]:
    """Stable (name, tensor) listing of every trainable array."""
    out = [
        ("mlp.w1", params.w1),
        ("mlp.b1", params.b1),
        ("mlp.w2", params.w2),
        ("mlp.b2", params.b2),
    ]
    for i in range(3):
        out.append((f"enc{i}.kernel", params.enc_kernels[i]))
        out.append((f"enc{i}.bias", params.enc_biases[i]))
    for i in range(3):
        out.append((f"dec{i}.kernel", params.dec_kernels[i]))
        out.append((f"dec{i}.bias", params.dec_biases[i]))
    out.append(("cls.weight", params.w_cls))
    out.append(("cls.bias", params.b_cls))
    return out


# ---------------------------------------------------------------------------
# primitive layers (forward + hand-rolled adjoints)
# ---------------------------------------------------------------------------

def _conv3d_forward(x, kernel, bias):
    """3x3x3 convolution, stride 1, zero padding 1, channels-last.

    Returns (out, cols) where cols is the im2col matrix cached for the
    backward pass.
    """
    h, w, z, ci = x.shape
    co = kernel.shape[0]
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3, 3), axis=(0, 1, 2))
    cols = win.reshape(h * w * z, ci * 27)
    out = cols @ kernel.reshape(co, -1).T + bias
    return out.reshape(h, w, z, co), cols


def _conv3d_backward(go, cols, kernel, x_shape):
    h, w, z, ci = x_shape
    co = kernel.shape[0]
    gof = go.reshape(-1, co)
    g_bias = gof.sum(axis=0)
    g_kernel = (gof.T @ cols).reshape(kernel.shape)
    gcols = (gof @ kernel.reshape(co, -1)).reshape(h, w, z, ci, 3, 3, 3)
    gxp = np.zeros((h + 2, w + 2, z + 2, ci))
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                gxp[dx:dx + h, dy:dy + w, dz:dz + z] += gcols[:, :, :, :, dx, dy, dz]
    return gxp[1:h + 1, 1:w + 1, 1:z + 1], g_kernel, g_bias


def _avgpool2(x):
    h, w, z, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, z // 2, 2, c).mean(axis=(1, 3, 5))


def _avgpool2_backward(go):
    h2, w2, z2, c = go.shape
    g = np.broadcast_to(
        (go / 8.0)[:, None, :, None, :, None, :], (h2, 2, w2, 2, z2, 2, c)
    )
    return g.reshape(h2 * 2, w2 * 2, z2 * 2, c)


def _upsample2(x):
    return np.repeat(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1), 2, axis=2)


def _upsample2_backward(go):
    h, w, z, c = go.shape
    return go.reshape(h // 2, 2, w // 2, 2, z // 2, 2, c).sum(axis=(1, 3, 5))


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def _mlp_forward(qdata, params):
    h, w, c = qdata.shape
    if c != params.w1.shape[1]:
        raise ShapeError(f"BEV width {c} does not match mlp input {params.w1.shape[1]}")
    cells = qdata.reshape(-1, c)
    act = np.tanh(cells @ params.w1.T + params.b1)
    out = act @ params.w2.T + params.b2
    vol = out.reshape(h, w, params.depth, params.voxel_channels)
    return vol, (cells, act)


def mlp_decode(q: BevQueryGrid, params: HeadParams) -> VoxelFeatureVolume:
    """Each BEV cell independently becomes a (depth, voxel_channels) column.

    out = w2 @ tanh(w1 @ q_cell + b1) + b2; only the hidden layer is
    activated, the output is linear.
    """
    vol, _ = _mlp_forward(q.data, params)
    return VoxelFeatureVolume(vol)


def _unet_forward(x, params):
    h, w, z, ch = x.shape
    if h % 8 or w % 8 or z % 8:
        raise ShapeError(f"UNet input dims must be divisible by 8, got {(h, w, z)}")
    if ch != params.enc_kernels[0].shape[1]:
        raise ShapeError(
            f"UNet input has {ch} channels, encoder expects {params.enc_kernels[0].shape[1]}"
        )
    enc_cache = []
    skips = []
    cur = x
    for k, b in zip(params.enc_kernels, params.enc_biases):
        pre, cols = _conv3d_forward(cur, k, b)
        act = np.tanh(pre)
        enc_cache.append((cols, act, cur.shape))
        skips.append(act)
        cur = _avgpool2(act)
    dec_cache = []
    for i, (k, b) in enumerate(zip(params.dec_kernels, params.dec_biases)):
        up = _upsample2(cur)
        skip = skips[2 - i]
        cat = np.concatenate([up, skip], axis=-1)
        pre, cols = _conv3d_forward(cat, k, b)
        act = np.tanh(pre)
        dec_cache.append((cols, act, cat.shape, up.shape[-1]))
        cur = act
    return cur, (enc_cache, dec_cache)


def unet3d_forward(v: VoxelFeatureVolume, params: HeadParams) -> VoxelFeatureVolume:
    """Three-level encoder/decoder at downscales {2, 4, 8}.

    Spatial dims are preserved (and must be divisible by 8); output channels
    are the last decoder width.
    """
    out, _ = _unet_forward(v.data, params)
    return VoxelFeatureVolume(out)


def classify(v: VoxelFeatureVolume, params: HeadParams) -> np.ndarray:
    """Per-voxel linear logits, shaped (h, w, z, num_classes)."""
    if v.data.shape[-1] != params.w_cls.shape[1]:
        raise ShapeError(
            f"volume has {v.data.shape[-1]} channels, classifier expects {params.w_cls.shape[1]}"
        )
    return v.data @ params.w_cls.T + params.b_cls


def head_logits(q: BevQueryGrid, params: HeadParams) -> np.ndarray:
    """classify(unet3d_forward(mlp_decode(q)))."""
    return classify(unet3d_forward(mlp_decode(q, params), params), params)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_loss_shapes(logits, gt: LabelGrid, mask: Optional[VoxelMask]):
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (h, w, z, num_classes), got {logits.shape}")
    if tuple(gt.spec.dims) != logits.shape[:3]:
        raise ShapeError(f"gt dims {gt.spec.dims} do not match logits {logits.shape[:3]}")
    if gt.spec.num_classes != logits.shape[3]:
        raise ShapeError(
            f"gt has {gt.spec.num_classes} classes, logits {logits.shape[3]}"
        )
    if mask is not None and tuple(mask.spec.dims) != logits.shape[:3]:
        raise ShapeError("mask dims do not match logits")


def _softmax(logits2d):
    m = logits2d.max(axis=1, keepdims=True)
    e = np.exp(logits2d - m)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits2d):
    m = logits2d.max(axis=1, keepdims=True)
    s = logits2d - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def ce_loss(logits: np.ndarray, gt: LabelGrid, mask: Optional[VoxelMask] = None) -> float:
    """Mean cross-entropy over included voxels (all voxels when mask is None)."""
    _check_loss_shapes(logits, gt, mask)
    ncls = logits.shape[3]
    logp = _log_softmax(logits.reshape(-1, ncls))
    lab = gt.labels.ravel()
    picked = logp[np.arange(lab.size), lab]
    if mask is not None:
        sel = mask.bits.ravel()
        if not sel.any():
            raise ValidationError("mask excludes every voxel; cross-entropy undefined")
        picked = picked[sel]
    return float(-picked.mean())


def dice_loss(logits: np.ndarray, gt: LabelGrid) -> float:
    """Soft dice averaged over all classes, free included.

    Per class c: 1 - (2 * sum_v p_v(c) g_v(c) + eps) /
    (sum_v p_v(c) + sum_v g_v(c) + eps) with one-hot g and eps = 1e-5.
    """
    _check_loss_shapes(logits, gt, None)
    ncls = logits.shape[3]
    p = _softmax(logits.reshape(-1, ncls))
    lab = gt.labels.ravel().astype(np.int64)
    inter = np.bincount(lab, weights=p[np.arange(lab.size), lab], minlength=ncls)
    p_sum = p.sum(axis=0)
    g_sum = np.bincount(lab, minlength=ncls).astype(np.float64)
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (p_sum + g_sum + DICE_EPS)
    return float(dice.mean())


def total_loss(
    logits: np.ndarray,
    gt: LabelGrid,
    mask: Optional[VoxelMask],
    lambda_ce: float,
    lambda_dice: float,
) -> float:
    """lambda_ce * ce_loss + lambda_dice * dice_loss (dice is unmasked)."""
    if lambda_ce < 0 or lambda_dice < 0:
        raise ValidationError("loss weights must be >= 0")
    out = 0.0
    if lambda_ce > 0:
        out += lambda_ce * ce_loss(logits, gt, mask)
    if lambda_dice > 0:
        out += lambda_dice * dice_loss(logits, gt)
    return float(out)


# ---------------------------------------------------------------------------
# reverse-mode gradients
# ---------------------------------------------------------------------------

def _ce_logit_grad(p, lab, sel):
    """d(mean masked CE)/dlogits, over flattened voxels."""
    n_inc = int(sel.sum())
    g = p.copy()
    g[np.arange(lab.size), lab] -= 1.0
    g[~sel] = 0.0
    return g / n_inc


def _dice_logit_grad(p, lab, ncls):
    """d(mean-class soft dice)/dlogits via the softmax Jacobian."""
    n = lab.size
    rows = np.arange(n)
    onehot_p = p[rows, lab]
    inter = np.bincount(lab, weights=onehot_p, minlength=ncls)
    p_sum = p.sum(axis=0)
    g_sum = np.bincount(lab, minlength=ncls).astype(np.float64)
    denom = p_sum + g_sum + DICE_EPS
    num = 2.0 * inter + DICE_EPS
    # dD_c/dp_vc = -(2 g_vc denom_c - num_c) / denom_c^2, averaged over classes
    dl_dp = np.broadcast_to(num / denom**2, (n, ncls)).copy()
    dl_dp[rows, lab] -= 2.0 / denom[lab]
    dl_dp /= ncls
    # softmax adjoint: dL/dz_k = p_k (dL/dp_k - sum_c dL/dp_c p_c)
    dot = (dl_dp * p).sum(axis=1, keepdims=True)
    return p * (dl_dp - dot)


def backward(
    q: BevQueryGrid,
    gt: LabelGrid,
    mask: Optional[VoxelMask],
    params: HeadParams,
) -> Dict[str, np.ndarray]:
    """Gradients of total_loss w.r.t. every parameter tensor.

    Returns a dict keyed like named_parameters(), plus "bev" for the
    gradient w.r.t. the BEV query grid itself.
    """
    lam_ce, lam_dice = params.loss_weights
    if lam_ce < 0 or lam_dice < 0 or (lam_ce == 0 and lam_dice == 0):
        raise ValidationError("loss weights must be >= 0 and not both zero")

    vol, mlp_cache = _mlp_forward(q.data, params)
    feat, (enc_cache, dec_cache) = _unet_forward(vol, params)
    logits = classify(VoxelFeatureVolume(feat), params)
    _check_loss_shapes(logits, gt, mask)

    ncls = logits.shape[3]
    n = gt.labels.size
    p = _softmax(logits.reshape(-1, ncls))
    lab = gt.labels.ravel().astype(np.int64)
    sel = np.ones(n, dtype=bool) if mask is None else mask.bits.ravel()
    if lam_ce > 0 and not sel.any():
        raise ValidationError("mask excludes every voxel; cross-entropy undefined")

    d_logits = np.zeros_like(p)
    if lam_ce > 0:
        d_logits += lam_ce * _ce_logit_grad(p, lab, sel)
    if lam_dice > 0:
        d_logits += lam_dice * _dice_logit_grad(p, lab, ncls)

    grads: Dict[str, np.ndarray] = {}

    # classifier
    feat_flat = feat.reshape(-1, feat.shape[-1])
    grads["cls.weight"] = d_logits.T @ feat_flat
    grads["cls.bias"] = d_logits.sum(axis=0)
    g_feat = (d_logits @ params.w_cls).reshape(feat.shape)

    # decoder, deepest-first on the way back
    g_cur = g_feat
    g_pooled_bottom = None
    g_skips = [None, None, None]
    for i in range(2, -1, -1):
        cols, act, cat_shape, up_ch = dec_cache[i]
        g_pre = g_cur * (1.0 - act * act)
        g_cat, g_k, g_b = _conv3d_backward(g_pre, cols, params.dec_kernels[i], cat_shape)
        grads[f"dec{i}.kernel"] = g_k
        grads[f"dec{i}.bias"] = g_b
        g_up = g_cat[..., :up_ch]
        g_skips[2 - i] = g_cat[..., up_ch:]
        g_down = _upsample2_backward(g_up)
        if i == 0:
            g_pooled_bottom = g_down
        else:
            g_cur = g_down
    # encoder, deepest-first; each activation feeds both its pool and one
    # decoder skip, so the two gradient paths add
    g_pool = g_pooled_bottom
    for i in range(2, -1, -1):
        cols, act, in_shape = enc_cache[i]
        g_act = _avgpool2_backward(g_pool) + g_skips[i]
        g_pre = g_act * (1.0 - act * act)
        g_in, g_k, g_b = _conv3d_backward(g_pre, cols, params.enc_kernels[i], in_shape)
        grads[f"enc{i}.kernel"] = g_k
        grads[f"enc{i}.bias"] = g_b
        g_pool = g_in

    # mlp (g_pool is now the gradient w.r.t. the decoded volume)
    cells, act = mlp_cache
    h, w, _ = q.data.shape
    g_out = g_pool.reshape(h * w, params.depth * params.voxel_channels)
    grads["mlp.w2"] = g_out.T @ act
    grads["mlp.b2"] = g_out.sum(axis=0)
    g_act = (g_out @ params.w2) * (1.0 - act * act)
    grads["mlp.w1"] = g_act.T @ cells
    grads["mlp.b1"] = g_act.sum(axis=0)
    grads["bev"] = (g_act @ params.w1).reshape(q.data.shape)
    return grads


def sgd_step(params: HeadParams, grads: Dict[str, np.ndarray], lr: float) -> HeadParams:
    """One plain gradient-descent step; returns new params."""
    updated = {name: arr - lr * grads[name] for name, arr in named_parameters(params)}
    return HeadParams(
        w1=updated["mlp.w1"],
        b1=updated["mlp.b1"],
        w2=updated["mlp.w2"],
        b2=updated["mlp.b2"],
        depth=params.depth,
        voxel_channels=params.voxel_channels,
        enc_kernels=[updated[f"enc{i}.kernel"] for i in range(3)],
        enc_biases=[updated[f"enc{i}.bias"] for i in range(3)],
        dec_kernels=[updated[f"dec{i}.kernel"] for i in range(3)],
        dec_biases=[updated[f"dec{i}.bias"] for i in range(3)],
        w_cls=updated["cls.weight"],
        b_cls=updated["cls.bias"],
        loss_weights=params.loss_weights,
    )
