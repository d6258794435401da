"""Independent reference implementations used as test oracles.

Everything here is deliberately written as straight-line, loop-based code
from the documented definitions, sharing no implementation path with the
package: set-counting IoU, a per-point box rasterizer with its own lattice,
a rotate-then-axis-aligned containment check, the splitmix64 stream, and a
central-difference gradient loop that only calls the forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from occkit import head


def iou_counts(pred_flat, gt_flat, mask_flat, num_classes):
    """Per-semantic-class (intersection, union) by materializing voxel sets."""
    out = []
    for c in range(num_classes - 1):
        pred_set = {
            v
            for v in range(len(pred_flat))
            if mask_flat[v] and pred_flat[v] == c
        }
        gt_set = {
            v for v in range(len(gt_flat)) if mask_flat[v] and gt_flat[v] == c
        }
        out.append((len(pred_set & gt_set), len(pred_set | gt_set)))
    return out


def miou_from_counts(counts):
    vals = [i / u for i, u in counts if u > 0]
    return sum(vals) / len(vals) if vals else float("nan")


def box_lattice(center, size, yaw, spacing):
    """Centered lattice points of one box, built with scalar loops."""
    ns = [max(1, math.floor(s / spacing)) for s in size]
    cos_y, sin_y = math.cos(yaw), math.sin(yaw)
    pts = []
    for i in range(ns[0]):
        lx = (i + 0.5) / ns[0] * size[0] - size[0] / 2.0
        for j in range(ns[1]):
            ly = (j + 0.5) / ns[1] * size[1] - size[1] / 2.0
            for k in range(ns[2]):
                lz = (k + 0.5) / ns[2] * size[2] - size[2] / 2.0
                pts.append(
                    (
                        center[0] + cos_y * lx - sin_y * ly,
                        center[1] + sin_y * lx + cos_y * ly,
                        center[2] + lz,
                    )
                )
    return pts


def point_in_box_aabb(point, center, size, yaw):
    """Rotate the point into the box frame with a matrix, then AABB test."""
    rot = np.array(
        [
            [math.cos(-yaw), -math.sin(-yaw), 0.0],
            [math.sin(-yaw), math.cos(-yaw), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    local = rot @ (np.asarray(point, dtype=float) - np.asarray(center, dtype=float))
    half = np.asarray(size, dtype=float) / 2.0
    return bool(np.all(np.abs(local) <= half))


def rasterize_boxes(boxes, spec, thresholds, spacing):
    """Per-box per-point double loop with the documented conflict rules.

    Returns (labels, scores) as plain numpy arrays shaped like the grid.
    """
    free = spec.num_classes - 1
    labels = np.full(spec.dims, free, dtype=np.int64)
    scores = np.zeros(spec.dims, dtype=np.float64)
    for b in boxes:
        if b.score < thresholds[b.class_id]:
            continue
        for p in box_lattice(b.center, b.size, b.yaw, spacing):
            vox = []
            ok = True
            for axis in range(3):
                i = math.floor((p[axis] - spec.origin[axis]) / spec.voxel_size)
                if not 0 <= i < spec.dims[axis]:
                    ok = False
                    break
                vox.append(i)
            if not ok:
                continue
            v = tuple(vox)
            if b.score > scores[v] or (
                b.score == scores[v] and b.class_id < labels[v]
            ):
                labels[v] = b.class_id
                scores[v] = b.score
    return labels, scores


_MASK64 = (1 << 64) - 1


def splitmix64(state):
    """One step of the reference stream: (next_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def hole_center(seed, image_index, hole_index, h, w):
    """Reference hole-center draw: mix seed with the image, skip hole_index
    outputs, then take (next mod h, next mod w)."""
    state = (seed ^ ((image_index * 0x9E3779B97F4A7C15) & _MASK64)) & _MASK64
    for _ in range(hole_index):
        state, _ = splitmix64(state)
    state, out = splitmix64(state)
    cy = out % h
    state, out = splitmix64(state)
    cx = out % w
    return cy, cx


def cutout_reference(data, seed, num_holes, hole_h, hole_w, fill):
    """Loop-based cutout on an (n, h, w, ch) array."""
    out = data.copy()
    n, h, w, _ = data.shape
    for i in range(n):
        for k in range(num_holes):
            cy, cx = hole_center(seed, i, k, h, w)
            r0 = cy - hole_h // 2
            c0 = cx - hole_w // 2
            for r in range(max(0, r0), min(h, r0 + hole_h)):
                for c in range(max(0, c0), min(w, c0 + hole_w)):
                    out[i, r, c, :] = fill
    return out


def fd_gradients(q, gt, mask, params, step=1e-6):
    """Central finite differences of total_loss for every parameter entry.

    Only the forward pass is exercised; head.backward is never called.
    """
    lam_ce, lam_dice = params.loss_weights

    def loss():
        return head.total_loss(head.head_logits(q, params), gt, mask, lam_ce, lam_dice)

    grads = {}
    for name, arr in head.named_parameters(params):
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
        grads[name] = g.reshape(arr.shape)
    return grads


def grad_rel_error(analytic, numeric):
    """||a - n|| / max(||a|| + ||n||, 1e-12), the per-tensor error measure."""
    a = np.linalg.norm(analytic)
    n = np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(a + n, 1e-12))
