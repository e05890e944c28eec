"""Slow, independent reference implementations used by the tests."""

import math

import numpy as np


def gaussian_kernels(sigma: float, truncate: float = 6.0):
    """Sampled, normalised Gaussian and its first two analytic derivatives."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-0.5 * x * x / sigma**2)
    g /= g.sum()
    d1 = -x / sigma**2 * g
    d2 = (x * x / sigma**4 - 1.0 / sigma**2) * g
    # enforce a zero-sum second-derivative kernel (flat input -> zero response)
    d2 = d2 - d2.sum() * g
    return radius, {0: g, 1: d1, 2: d2}


def brute_hessian(img: np.ndarray, sigma: float):
    """Per-pixel explicit 2-D convolution with mirrored borders."""
    img = np.asarray(img, dtype=float)
    radius, k = gaussian_kernels(sigma)
    padded = np.pad(img, radius, mode="symmetric")
    # convolution: flip kernels so window[u, v] pairs with k[-u], k[-v]
    kxx = np.outer(k[0][::-1], k[2][::-1])
    kxy = np.outer(k[1][::-1], k[1][::-1])
    kyy = np.outer(k[2][::-1], k[0][::-1])
    h, w = img.shape
    out = np.zeros((3, h, w))
    size = 2 * radius + 1
    for i in range(h):
        for j in range(w):
            win = padded[i : i + size, j : j + size]
            out[0, i, j] = np.sum(win * kxx)
            out[1, i, j] = np.sum(win * kxy)
            out[2, i, j] = np.sum(win * kyy)
    return out * sigma**2


def brute_eig2(a: float, b: float, d: float):
    """Eigenvalues of [[a, b], [b, d]] via a general solver, ordered |l1| <= |l2|."""
    ev = np.linalg.eigvals(np.array([[a, b], [b, d]]))
    ev = np.real(ev)
    ev = sorted(ev, key=abs)
    return float(ev[0]), float(ev[1])


def brute_vesselness(hxx, hxy, hyy, beta: float, c, polarity: str):
    h, w = hxx.shape
    l1 = np.zeros((h, w))
    l2 = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            l1[i, j], l2[i, j] = brute_eig2(hxx[i, j], hxy[i, j], hyy[i, j])
    s = np.sqrt(l1**2 + l2**2)
    if c == "auto":
        c = 0.5 * s.max()
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            a, b = l1[i, j], l2[i, j]
            if b == 0 or c == 0:
                continue
            if polarity == "dark" and not b > 0:
                continue
            if polarity == "bright" and not b < 0:
                continue
            rb = a / b
            out[i, j] = math.exp(-rb * rb / (2 * beta * beta)) * (1 - math.exp(-s[i, j] ** 2 / (2 * c * c)))
    return out


def brute_frangi(img, scales, beta=0.5, c="auto", polarity="dark"):
    best = None
    for s in scales:
        v = brute_vesselness(*brute_hessian(img, s), beta, c, polarity)
        best = v if best is None else np.maximum(best, v)
    return best


def otsu_sweep(values: np.ndarray) -> float:
    """Threshold -> maximise between-class variance by trying every midpoint."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    uniq = np.unique(v)
    best_t, best_var = None, -1.0
    for lo, hi in zip(uniq[:-1], uniq[1:]):
        t = 0.5 * (lo + hi)
        a, b = v[v <= t], v[v > t]
        w0, w1 = a.size / v.size, b.size / v.size
        var = w0 * w1 * (a.mean() - b.mean()) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return best_t


def bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer line pixels from (r0, c0) to (r1, c1), endpoints included."""
    pts = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            break
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr
    return pts
