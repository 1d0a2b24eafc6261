"""Shared fixtures and independent oracles used across the suite."""

import numpy as np
import pytest

from slimgraph.builders import GraphBuilder
from slimgraph.graph import infer_shapes


def conv2d_reference(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Direct nested-loop cross-correlation, independent of the library path."""
    if isinstance(stride, int):
        stride = (stride, stride)
    if isinstance(padding, int):
        padding = (padding, padding)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    y = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[ni, ci, i * sh + di, j * sw + dj] * w[co, ci, di, dj]
                    y[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return y


def finite_difference(f, x, h=1e-3):
    """Central finite differences of a scalar function wrt every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_close(a, b, tol):
    """|a-b| <= tol * max(1, |a|, |b|) elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return bool((np.abs(a - b) <= tol * denom).all())


def chain_graph(seed=0):
    """input -> conv_block(3->8,k3) -> conv(8->4,k3) -> output, on 8x8 maps."""
    b = GraphBuilder("chain", (1, 3, 8, 8), seed=seed)
    x = b.add("input", "image", [])
    y = b.conv_block(x, 3, 8, k=3, prefix="blk")
    y = b.conv(y, 8, 4, k=3, prefix="head")
    b.add("output", "out", [y])
    g = b.graph
    g.validate()
    infer_shapes(g)
    return g


def residual_graph(seed=0, c=4):
    """input -> conv_block -> add(x, f(x)) -> conv -> output."""
    b = GraphBuilder("residual", (1, c, 6, 6), seed=seed)
    x = b.add("input", "image", [])
    stem = b.conv_block(x, c, c, k=3, prefix="stem")
    f = b.conv_block(stem, c, c, k=3, prefix="f")
    s = b.add("add", "res", [stem, f])
    y = b.conv(s, c, 3, k=1, prefix="head")
    b.add("output", "out", [y])
    g = b.graph
    g.validate()
    infer_shapes(g)
    return g


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0xC0FFEE)
