"""Independent brute-force oracles shared by the unit and acceptance suites.

These intentionally stay loop-based and separate from the library
implementations they check.
"""

import numpy as np
import torch


def brute_dice_loss(pred, ref, eps=1e-6):
    inter = s_p = s_r = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            for k in range(pred.shape[2]):
                p, r = float(pred[i, j, k]), float(ref[i, j, k])
                inter += p * r
                s_p += p
                s_r += r
    return -2.0 * inter / (s_p + s_r + eps)


def brute_mse(a, b):
    acc = 0.0
    n = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                acc += (float(a[i, j, k]) - float(b[i, j, k])) ** 2
                n += 1
    return acc / n


def brute_count_organ_patches(mask_data, p):
    count = 0
    for i in range(0, mask_data.shape[0], p):
        for j in range(0, mask_data.shape[1], p):
            for k in range(0, mask_data.shape[2], p):
                if mask_data[i : i + p, j : j + p, k : k + p].any():
                    count += 1
    return count


def finite_diff_gradient(fn, params, h=1e-5):
    """Central differences of a scalar fn w.r.t. a list of double tensors."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.view(-1)
        gflat = g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


def rel_vec_err(a, b):
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    return float(torch.linalg.vector_norm(a - b) / torch.clamp(torch.maximum(na, nb), min=1e-12))


def ellipsoid_mask_data(shape, radii, center=None):
    center = center or tuple(s / 2.0 - 0.5 for s in shape)
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return (q <= 1.0).astype(np.uint8)
