"""Low-level array kernels shared by the layer modules.

Index convention (2-D form of the 1-D correlation with centred taps): with an
odd kernel size S and padding p = (S - 1) // 2,

    y[n, d, i, j] = sum_{c,u,v} x[n, c, i*s + u - p, j*s + v - p] * w[d, c, u, v]

where reads outside the input are zero. Kernel position (u, v) has linear
index u * S + v, and its spatial offset is (u - p, v - p).
"""
import numba
import numpy as np


def out_size(n: int, s: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - s) // stride + 1


def pad_input(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


@numba.njit(cache=True)
def im2col(x, s, stride, pad):
    """Patches as a channels-last (N, Ho, Wo, S, S, C) array; zero outside the input."""
    n_batch, c_in, h, wd = x.shape
    ho = (h + 2 * pad - s) // stride + 1
    wo = (wd + 2 * pad - s) // stride + 1
    out = np.zeros((n_batch, ho, wo, s, s, c_in), dtype=x.dtype)
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for u in range(s):
                    r = i * stride + u - pad
                    if r < 0 or r >= h:
                        continue
                    for v in range(s):
                        q = j * stride + v - pad
                        if q < 0 or q >= wd:
                            continue
                        for c in range(c_in):
                            out[n, i, j, u, v, c] = x[n, c, r, q]
    return out


@numba.njit(cache=True)
def _col2im_nhwc(dcols, n_batch, c_in, h, wd, stride, pad):
    _, ho, wo, s, _, _ = dcols.shape
    acc = np.zeros((n_batch, h, wd, c_in), dtype=dcols.dtype)
    for n in range(n_batch):
        for i in range(ho):
            for j in range(wo):
                for u in range(s):
                    r = i * stride + u - pad
                    if r < 0 or r >= h:
                        continue
                    for v in range(s):
                        q = j * stride + v - pad
                        if q < 0 or q >= wd:
                            continue
                        for c in range(c_in):
                            acc[n, r, q, c] += dcols[n, i, j, u, v, c]
    return acc


def col2im(dcols, n_batch, c_in, h, wd, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add (N, Ho, Wo, S, S, C) patches into (N, C, H, W)."""
    return _col2im_nhwc(dcols, n_batch, c_in, h, wd, stride, pad).transpose(0, 3, 1, 2)


@numba.njit(cache=True)
def conv2d_direct(x, w, stride, pad):
    """Reference convolution: six nested loops, no tricks.

    Products and sums are carried in float64 (a float32 product is exact
    there) and rounded to the input dtype once per output element.
    """
    n_batch, c_in, h, wd = x.shape
    d_out, _, s, _ = w.shape
    ho = (h + 2 * pad - s) // stride + 1
    wo = (wd + 2 * pad - s) // stride + 1
    y = np.zeros((n_batch, d_out, ho, wo), dtype=x.dtype)
    for n in range(n_batch):
        for d in range(d_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(s):
                            r = i * stride + u - pad
                            if r < 0 or r >= h:
                                continue
                            for v in range(s):
                                q = j * stride + v - pad
                                if q < 0 or q >= wd:
                                    continue
                                acc += np.float64(x[n, c, r, q]) * np.float64(w[d, c, u, v])
                    y[n, d, i, j] = acc
    return y


@numba.njit(cache=True)
def _valid_range(n_out, stride, off, n_in):
    """Output indices o with 0 <= o*stride + off < n_in, as [lo, hi)."""
    lo = 0
    while lo < n_out and lo * stride + off < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride + off >= n_in:
        hi -= 1
    return lo, hi


@numba.njit(cache=True)
def shift_gather(x, table, w_tilde, s, stride, pad):
    """Fused shift kernel: one gather and one multiply-accumulate per (d, c).

    ``table[d, c]`` is the kept kernel position; the read for output (i, j)
    comes from input (i*stride + u - pad, j*stride + v - pad). Each output
    row is swept contiguously per input channel; per output element the
    channels are still summed in ascending order starting from zero, so the
    result matches a dense loop over the one-hot weights exactly. Like
    :func:`conv2d_direct` it accumulates in float64; the caller rounds.
    """
    n_batch, c_in, h, wd = x.shape
    d_out = table.shape[0]
    ho = (h + 2 * pad - s) // stride + 1
    wo = (wd + 2 * pad - s) // stride + 1
    y = np.zeros((n_batch, d_out, ho, wo), dtype=np.float64)
    for n in range(n_batch):
        for d in range(d_out):
            for c in range(c_in):
                pos = table[d, c]
                du = pos // s - pad
                dv = pos % s - pad
                wv = np.float64(w_tilde[d, c])
                i0, i1 = _valid_range(ho, stride, du, h)
                j0, j1 = _valid_range(wo, stride, dv, wd)
                for i in range(i0, i1):
                    r = i * stride + du
                    for j in range(j0, j1):
                        y[n, d, i, j] += np.float64(x[n, c, r, j * stride + dv]) * wv
    return y


@numba.njit(cache=True)
def sparse_gather(x, positions, weights, s, stride, pad):
    """k-sparse generalisation: ``positions``/``weights`` are (D, C, k), positions ascending per slice.

    Returns float64 sums, like :func:`shift_gather`.
    """
    n_batch, c_in, h, wd = x.shape
    d_out, _, k = positions.shape
    ho = (h + 2 * pad - s) // stride + 1
    wo = (wd + 2 * pad - s) // stride + 1
    y = np.zeros((n_batch, d_out, ho, wo), dtype=np.float64)
    for n in range(n_batch):
        for d in range(d_out):
            for c in range(c_in):
                for m in range(k):
                    pos = positions[d, c, m]
                    du = pos // s - pad
                    dv = pos % s - pad
                    wv = np.float64(weights[d, c, m])
                    i0, i1 = _valid_range(ho, stride, du, h)
                    j0, j1 = _valid_range(wo, stride, dv, wd)
                    for i in range(i0, i1):
                        r = i * stride + du
                        for j in range(j0, j1):
                            y[n, d, i, j] += np.float64(x[n, c, r, j * stride + dv]) * wv
    return y


def shift_channels(x: np.ndarray, positions: np.ndarray, s: int, stride: int, pad: int) -> np.ndarray:
    """Shift every input map once by its own kernel position (per-channel path)."""
    xp = pad_input(x, pad)
    n, c, h, w = x.shape
    ho, wo = out_size(h, s, stride, pad), out_size(w, s, stride, pad)
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for ch in range(c):
        u, v = divmod(int(positions[ch]), s)
        out[:, ch] = xp[:, ch, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return out
