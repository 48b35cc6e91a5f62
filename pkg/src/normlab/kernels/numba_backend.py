"""Numba-jitted convolution kernels.

Loops are ordered so the innermost index runs over contiguous memory in
both source and destination, which LLVM vectorizes to FMA code. Parallel
slices write disjoint output regions and each output element is reduced
in a fixed order, so results are deterministic regardless of thread count.
"""

import warnings

import numpy as np
from numba import njit, prange

# numba warns when the optional TBB threading layer is too old; it falls
# back to omp/workqueue which is fine for these kernels.
warnings.filterwarnings("ignore", message=".*TBB threading layer.*")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


@njit(parallel=True, cache=True)
def _fwd(xp, w, b, out):
    n, cout, ho, wo = out.shape
    cin = xp.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    for nco in prange(n * cout):
        i_n = nco // cout
        co = nco % cout
        for i in range(ho):
            for j in range(wo):
                out[i_n, co, i, j] = b[co]
        for ci in range(cin):
            for di in range(kh):
                for dj in range(kw):
                    wv = w[co, ci, di, dj]
                    for i in range(ho):
                        for j in range(wo):
                            out[i_n, co, i, j] += wv * xp[i_n, ci, i + di, j + dj]


@njit(parallel=True, cache=True)
def _grad_input(gy, w, dxp):
    n, cout, ho, wo = gy.shape
    cin = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    for i_n in prange(n):
        for co in range(cout):
            for ci in range(cin):
                for di in range(kh):
                    for dj in range(kw):
                        wv = w[co, ci, di, dj]
                        for i in range(ho):
                            for j in range(wo):
                                dxp[i_n, ci, i + di, j + dj] += wv * gy[i_n, co, i, j]


# fastmath lets LLVM vectorize the inner-j reduction (reassociation);
# the summation order is fixed at compile time, so results stay
# deterministic run to run.
@njit(parallel=True, cache=True, fastmath=True)
def _grad_weight(gy, xp, dw):
    n, cout, ho, wo = gy.shape
    cin = xp.shape[1]
    kh = dw.shape[2]
    kw = dw.shape[3]
    for co in prange(cout):
        for ci in range(cin):
            for di in range(kh):
                for dj in range(kw):
                    acc = 0.0
                    for i_n in range(n):
                        for i in range(ho):
                            for j in range(wo):
                                acc += gy[i_n, co, i, j] * xp[i_n, ci, i + di, j + dj]
                    dw[co, ci, di, dj] = acc


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   ph: int, pw: int) -> np.ndarray:
    n, _, h, w_in = x.shape
    cout, _, kh, kw = w.shape
    ho = h + 2 * ph - kh + 1
    wo = w_in + 2 * pw - kw + 1
    xp = _pad(x, ph, pw)
    out = np.empty((n, cout, ho, wo))
    _fwd(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), out)
    return out


def conv2d_grad_input(gy: np.ndarray, w: np.ndarray, h: int, w_in: int,
                      ph: int, pw: int) -> np.ndarray:
    n = gy.shape[0]
    cin = w.shape[1]
    dxp = np.zeros((n, cin, h + 2 * ph, w_in + 2 * pw))
    _grad_input(np.ascontiguousarray(gy), np.ascontiguousarray(w), dxp)
    if ph == 0 and pw == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w_in])


def conv2d_grad_weight(gy: np.ndarray, x: np.ndarray, kh: int, kw: int,
                       ph: int, pw: int) -> np.ndarray:
    cout = gy.shape[1]
    cin = x.shape[1]
    xp = _pad(x, ph, pw)
    dw = np.empty((cout, cin, kh, kw))
    _grad_weight(np.ascontiguousarray(gy), xp, dw)
    return dw
