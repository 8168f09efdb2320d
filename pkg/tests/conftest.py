"""Shared fixtures and brute-force reference implementations."""
from __future__ import annotations

import numpy as np
import pytest


def conv_loop(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Scalar nested-loop cross-correlation.

    Per output element the taps are summed channel-major, then row, then
    column, starting from zero, with the bias added last; out-of-bounds taps
    are skipped.
    """
    n, c, h, w = x.shape
    co, _, kh, kw = weight.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    dtype = np.result_type(x, weight)
    out = np.zeros((n, co, ho, wo), dtype=dtype)
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = dtype.type(0)
                    for k in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u * dilation - padding
                                s = j * stride + v * dilation - padding
                                if 0 <= r < h and 0 <= s < w:
                                    acc = acc + weight[o, k, u, v] * x[b, k, r, s]
                    if bias is not None:
                        acc = acc + bias[o]
                    out[b, o, i, j] = acc
    return out


def involution_loop(x, kernels, K, groups=1, stride=1, dilation=1):
    """Scalar nested-loop involution with zero padding ``dilation*(K-1)/2``."""
    n, c, h, w = x.shape
    ho, wo = kernels.shape[2:]
    half = K // 2
    cg = c // groups
    dtype = np.result_type(x, kernels)
    out = np.zeros((n, c, ho, wo), dtype=dtype)
    for b in range(n):
        for ch in range(c):
            g = ch // cg
            for i in range(ho):
                for j in range(wo):
                    acc = dtype.type(0)
                    for u in range(K):
                        for v in range(K):
                            r = i * stride + dilation * (u - half)
                            s = j * stride + dilation * (v - half)
                            if 0 <= r < h and 0 <= s < w:
                                acc = acc + kernels[b, g * K * K + u * K + v, i, j] * x[b, ch, r, s]
                    out[b, ch, i, j] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A small synthetic dataset on disk (8 images, 32x32)."""
    from speednet.data import synth_dataset, write_dataset

    root = tmp_path_factory.mktemp("synth")
    write_dataset(synth_dataset(8, 32, seed=3), root)
    return root
