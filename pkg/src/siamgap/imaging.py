"""Bilinear resampling shared by patch extraction and Grad-CAM upsampling."""
import numpy as np
from scipy import ndimage


def sample_bilinear(img, x0, y0, width, height, out_h, out_w):
    """Resample the region ``[x0, x0+width) x [y0, y0+height)`` onto an out_h x out_w grid.

    Output pixel centres map to source pixel centres (half-pixel convention),
    so an integer-aligned region of exactly out_h x out_w reproduces the
    source pixels bitwise. Samples outside the image take the edge value.
    """
    sx = width / out_w
    sy = height / out_h
    xs = x0 + (np.arange(out_w) + 0.5) * sx - 0.5
    ys = y0 + (np.arange(out_h) + 0.5) * sy - 0.5
    if sx == 1.0 and sy == 1.0 and float(x0).is_integer() and float(y0).is_integer():
        xi, yi = int(x0), int(y0)
        if 0 <= xi and 0 <= yi and xi + out_w <= img.shape[1] and yi + out_h <= img.shape[0]:
            return np.array(img[yi:yi + out_h, xi:xi + out_w], dtype=np.float64)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(
        np.asarray(img, dtype=np.float64), [yy, xx], order=1, mode="nearest"
    )


def resize_bilinear(img, out_h, out_w):
    h, w = img.shape
    return sample_bilinear(img, 0, 0, w, h, out_h, out_w)
