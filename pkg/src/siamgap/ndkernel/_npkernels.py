"""Pure-numpy im2col / col2im, used when the compiled module is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    n_img, chans = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n_img * ho * wo, chans * kh * kw
    )


def col2im(cols, n_img, chans, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    blocks = cols.reshape(n_img, ho, wo, chans, kh, kw)
    out = np.zeros((n_img, chans, hp, wp), dtype=cols.dtype)
    # accumulate in (i, j) order; the compiled kernel uses the same order
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out
