"""Compiled direct-convolution kernels.

Every output voxel is accumulated in the fixed order (input channel, kd, kh, kw)
starting from zero, with separate multiply and add (no fused multiply-add), so
results are reproducible bit-for-bit by a plain nested-loop reference.

Strided correlation uses a polyphase layout: the padded input is split into
``stride**3`` phase volumes so that every tap becomes a constant flat offset
into one phase, and both strides share the same vectorisable inner loop.
"""
import numba
import numpy as np

# prefer OpenMP so numba never probes an outdated TBB install
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

_BLOCK = 4
_CHUNK = 1024


@numba.njit(cache=True, boundscheck=False)
def _accumulate(xf, w, rows, offsets, out, start, m, co0, nb, acc):
    ci_n = w.shape[1]
    taps = w.shape[2]
    n_phase = xf.shape[0] // ci_n
    for c in range(nb):
        for i in range(m):
            acc[c, i] = 0
    for ci in range(ci_n):
        for t in range(taps):
            x = xf[ci * n_phase + rows[t]]
            base = start + offsets[t]
            if nb == _BLOCK:
                w0 = w[co0, ci, t]
                w1 = w[co0 + 1, ci, t]
                w2 = w[co0 + 2, ci, t]
                w3 = w[co0 + 3, ci, t]
                a0 = acc[0]
                a1 = acc[1]
                a2 = acc[2]
                a3 = acc[3]
                for i in range(m):
                    xv = x[base + i]
                    a0[i] += w0 * xv
                    a1[i] += w1 * xv
                    a2[i] += w2 * xv
                    a3[i] += w3 * xv
            else:
                for c in range(nb):
                    wv = w[co0 + c, ci, t]
                    a = acc[c]
                    for i in range(m):
                        a[i] += wv * x[base + i]
    for c in range(nb):
        o = out[co0 + c]
        a = acc[c]
        for i in range(m):
            o[start + i] = a[i]


@numba.njit(cache=True, parallel=True, boundscheck=False)
def correlate_flat(xf, w, rows, offsets, n, out):
    """Correlation over flattened phase volumes.

    ``xf`` is [C_in * P, N] (P phases per channel), ``w`` [C_out, C_in, taps];
    tap ``t`` reads phase ``rows[t]`` at flat displacement ``offsets[t]``.
    Fills ``out[:, :n]``.
    """
    co_n = w.shape[0]
    n_blocks = (co_n + _BLOCK - 1) // _BLOCK
    n_chunks = (n + _CHUNK - 1) // _CHUNK
    for job in numba.prange(n_blocks * n_chunks):
        b = job // n_chunks
        start = (job % n_chunks) * _CHUNK
        m = min(_CHUNK, n - start)
        co0 = b * _BLOCK
        nb = min(_BLOCK, co_n - co0)
        acc = np.empty((_BLOCK, _CHUNK), out.dtype)
        _accumulate(xf, w, rows, offsets, out, start, m, co0, nb, acc)
    return out


def correlate(xp, w, stride):
    """Bias-free correlation of an already padded input.

    ``xp`` is [C_in, Dp, Hp, Wp], ``w`` [C_out, C_in, k, k, k]. Returns
    [C_out, ceil(D/s), ceil(H/s), ceil(W/s)] where D = Dp - k + 1.
    """
    c_in = xp.shape[0]
    c_out, _, k, _, _ = w.shape
    s = stride
    valid = [e - k + 1 for e in xp.shape[1:]]
    out_ext = [-(-e // s) for e in valid]
    ph = [-(-e // s) for e in xp.shape[1:]]
    if s == 1:
        xf = np.ascontiguousarray(xp).reshape(c_in, -1)
    else:
        full = np.zeros((c_in, ph[0] * s, ph[1] * s, ph[2] * s), dtype=xp.dtype)
        full[:, :xp.shape[1], :xp.shape[2], :xp.shape[3]] = xp
        xf = (full.reshape(c_in, ph[0], s, ph[1], s, ph[2], s)
              .transpose(0, 2, 4, 6, 1, 3, 5)
              .reshape(c_in * s ** 3, -1))
        xf = np.ascontiguousarray(xf)
    hw = ph[1] * ph[2]
    rows = np.empty(k ** 3, dtype=np.int64)
    offsets = np.empty(k ** 3, dtype=np.int64)
    t = 0
    for a in range(k):
        for b in range(k):
            for c in range(k):
                rows[t] = ((a % s) * s + (b % s)) * s + (c % s)
                offsets[t] = (a // s) * hw + (b // s) * ph[2] + (c // s)
                t += 1
    n = (out_ext[0] - 1) * hw + (out_ext[1] - 1) * ph[2] + out_ext[2]
    flat = np.empty((c_out, ph[0] * hw), dtype=xp.dtype)
    correlate_flat(xf, np.ascontiguousarray(w.reshape(c_out, c_in, k ** 3)), rows, offsets, n, flat)
    return flat.reshape(c_out, ph[0], ph[1], ph[2])[:, :out_ext[0], :out_ext[1], :out_ext[2]]
