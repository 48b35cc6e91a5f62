"""Pure-numpy convolution kernels (shift-and-gemm, BLAS-backed).

Each kernel tap (di, dj) contributes one [N*H*W, Cin] x [Cin, Cout] matrix
product against a shifted view of the padded input, avoiding the memory
blow-up of a full im2col buffer.
"""

import numpy as np


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   ph: int, pw: int) -> np.ndarray:
    n, _, h, w_in = x.shape
    cout, _, kh, kw = w.shape
    ho = h + 2 * ph - kh + 1
    wo = w_in + 2 * pw - kw + 1
    xp = _pad(x, ph, pw)
    acc = np.zeros((n, ho, wo, cout))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + ho, dj:dj + wo]
            acc += np.tensordot(patch, w[:, :, di, dj], axes=([1], [1]))
    y = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    y += b.reshape(1, cout, 1, 1)
    return y


def conv2d_grad_input(gy: np.ndarray, w: np.ndarray, h: int, w_in: int,
                      ph: int, pw: int) -> np.ndarray:
    n, _, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    dxp = np.zeros((n, cin, h + 2 * ph, w_in + 2 * pw))
    for di in range(kh):
        for dj in range(kw):
            t = np.tensordot(gy, w[:, :, di, dj], axes=([1], [0]))  # [N,Ho,Wo,Cin]
            dxp[:, :, di:di + ho, dj:dj + wo] += t.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w_in])


def conv2d_grad_weight(gy: np.ndarray, x: np.ndarray, kh: int, kw: int,
                       ph: int, pw: int) -> np.ndarray:
    n, cout, ho, wo = gy.shape
    cin = x.shape[1]
    xp = _pad(x, ph, pw)
    dw = np.empty((cout, cin, kh, kw))
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di:di + ho, dj:dj + wo]
            dw[:, :, di, dj] = np.tensordot(gy, patch, axes=([0, 2, 3], [0, 2, 3]))
    return dw
