"""Brute-force reference computations.

These are written against the mathematical definitions with plain Python
loops and deliberately share no code with the fast paths they check. They back
both the test-suite and ``neuronet selftest``.
"""
import math

import numpy as np


def direct_conv3d(x, kernel, bias, stride):
    """Six-nested-loop same-padded correlation (float64 scalars).

    Per output voxel the taps are summed from 0.0 in the order
    (input channel, kd, kh, kw); out-of-bounds taps are skipped; bias last.
    """
    c_in, d, h, w = x.shape
    c_out, _, k, _, _ = kernel.shape
    p = k // 2
    od_n, oh_n, ow_n = -(-d // stride), -(-h // stride), -(-w // stride)
    out = np.zeros((c_out, od_n, oh_n, ow_n))
    xl = x.tolist()
    kl = kernel.tolist()
    for co in range(c_out):
        for od in range(od_n):
            for oh in range(oh_n):
                for ow in range(ow_n):
                    acc = 0.0
                    for ci in range(c_in):
                        for a in range(k):
                            i = od * stride + a - p
                            if not 0 <= i < d:
                                continue
                            for b in range(k):
                                j = oh * stride + b - p
                                if not 0 <= j < h:
                                    continue
                                for c in range(k):
                                    l = ow * stride + c - p
                                    if 0 <= l < w:
                                        acc += kl[co][ci][a][b][c] * xl[ci][i][j][l]
                    out[co, od, oh, ow] = acc + float(bias[co])
    return out


def interpolate_trilinear(x):
    """Per-voxel 2x trilinear upsampling with explicit corner weights."""
    c, d, h, w = x.shape
    out = np.zeros((c, 2 * d, 2 * h, 2 * w))

    def coord(o, extent):
        src = (o + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), extent - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, extent - 1)
        return lo, hi, src - lo

    for z in range(2 * d):
        z0, z1, fz = coord(z, d)
        for y in range(2 * h):
            y0, y1, fy = coord(y, h)
            for v in range(2 * w):
                v0, v1, fv = coord(v, w)
                for ch in range(c):
                    total = 0.0
                    for zi, wz in ((z0, 1 - fz), (z1, fz)):
                        for yi, wy in ((y0, 1 - fy), (y1, fy)):
                            for vi, wv in ((v0, 1 - fv), (v1, fv)):
                                total += wz * wy * wv * x[ch, zi, yi, vi]
                    out[ch, z, y, v] = total
    return out


def cross_entropy_per_voxel(logits, labels):
    """Mean over voxels of -log(softmax(logits)[label]), one voxel at a time."""
    c = logits.shape[0]
    flat_logits = logits.reshape(c, -1)
    flat_labels = labels.reshape(-1)
    total = 0.0
    for v in range(flat_labels.size):
        col = [float(flat_logits[i, v]) for i in range(c)]
        denom = sum(math.exp(z) for z in col)
        total += -math.log(math.exp(col[int(flat_labels[v])]) / denom)
    return total / flat_labels.size


def dice_by_counting(a, b, label):
    """2|A&B| / (|A|+|B|) by explicit voxel counting; NaN when both empty."""
    inter = size_a = size_b = 0
    for pa, pb in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        in_a = pa == label
        in_b = pb == label
        size_a += in_a
        size_b += in_b
        inter += in_a and in_b
    if size_a + size_b == 0:
        return float("nan")
    return 2.0 * inter / (size_a + size_b)


def mean_dice_by_counting(pred, target, n_classes):
    vals = [dice_by_counting(pred, target, lab) for lab in range(1, n_classes)]
    vals = [v for v in vals if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")


def adam_closed_form(theta, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-5):
    """Scalar Adam trajectory evaluated from the update equations."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
    return theta


def parameter_count(n_scales, n_units, strides, filters, class_counts, initial_kernel=3, kernel=3):
    """Closed-form count of trainable scalars in the encoder/decoder network."""
    total = initial_kernel ** 3 * 1 * filters[0] + filters[0]
    c_prev = filters[0]
    for j in range(n_scales):
        for i in range(n_units):
            c_in = c_prev if i == 0 else filters[j]
            c_out = filters[j]
            stride = strides[j] if i == 0 else 1
            total += 2 * c_in                                   # bn1
            total += kernel ** 3 * c_in * c_out + c_out         # conv1
            total += 2 * c_out                                  # bn2
            total += kernel ** 3 * c_out * c_out + c_out        # conv2
            if stride != 1 or c_in != c_out:
                total += c_in * c_out + c_out                   # projection
        c_prev = filters[j]
    for n in class_counts:
        total += sum(f * n + n for f in filters)
    return total
