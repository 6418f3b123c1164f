"""Independent slow reference implementations used as test oracles.

Nothing here calls into the kernels under test; everything is spelled out
with explicit loops in float64 or Python integers.
"""

from fractions import Fraction
import math

import numpy as np


def naive_conv(x, w, b, act="none", lo=None, hi=None):
    """Direct SAME-padded stride-1 convolution, one output element at a time."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    h, wd, cin = x.shape
    cout, k, _, _ = w.shape
    p = k // 2
    out = np.zeros((h, wd, cout))
    for y in range(h):
        for xx in range(wd):
            for o in range(cout):
                s = float(b[o])
                for u in range(k):
                    for v in range(k):
                        yy, xv = y + u - p, xx + v - p
                        if 0 <= yy < h and 0 <= xv < wd:
                            s += float(np.dot(w[o, u, v, :], x[yy, xv, :]))
                out[y, xx, o] = s
    return _act(out, act, lo, hi)


def window_conv(x, w, b, act="none", lo=None, hi=None):
    """Same as naive_conv but vectorised over channels per output pixel."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    h, wd, _ = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.empty((h, wd, w.shape[0]))
    for y in range(h):
        for xx in range(wd):
            patch = xp[y : y + k, xx : xx + k, :]
            out[y, xx] = np.tensordot(w, patch, axes=([1, 2, 3], [0, 1, 2])) + b
    return _act(out, act, lo, hi)


def _act(a, act, lo, hi):
    if act == "relu":
        return np.maximum(a, 0)
    if act == "clip":
        return np.clip(a, lo, hi)
    return a


def naive_d2s(x, block):
    h, w, c = x.shape
    co = c // (block * block)
    out = np.zeros((h * block, w * block, co), x.dtype)
    for y in range(h):
        for xx in range(w):
            for dy in range(block):
                for dx in range(block):
                    for ch in range(co):
                        out[y * block + dy, xx * block + dx, ch] = x[y, xx, (dy * block + dx) * co + ch]
    return out


def interpret(g, x):
    """Memoised recursive evaluation of a graph with the naive kernels (float64)."""
    memo = {g.input_id: np.asarray(x, np.float64)}

    def ev(nid):
        if nid in memo:
            return memo[nid]
        n = g[nid]
        args = [ev(s) for s in n.inputs]
        if n.op == "conv2d":
            s = n.spec
            r = window_conv(args[0], s.weights, s.bias, s.activation.kind, s.activation.lo, s.activation.hi)
        elif n.op == "add":
            r = _act(args[0] + args[1], n.activation.kind, n.activation.lo, n.activation.hi)
        elif n.op == "concat":
            r = np.concatenate(args, axis=2)
        elif n.op == "clip":
            r = np.clip(args[0], n.lo, n.hi)
        elif n.op == "depth_to_space":
            r = naive_d2s(args[0], n.block)
        elif n.op == "input_repeat":
            r = np.concatenate([args[0]] * n.times, axis=2)
        else:
            raise AssertionError(n.op)
        memo[nid] = r
        return r

    return ev(g.output_id)


def bigint_conv_int8(xq, zin, wq, bias, mantissas, shifts, zout, qlo=-128, qhi=127):
    """Integer conv + fixed-point requantization with Python ints and Fractions."""
    h, w, cin = xq.shape
    cout, k, _, _ = wq.shape
    p = k // 2
    out = np.zeros((h, w, cout), np.int64)
    for y in range(h):
        for xx in range(w):
            for o in range(cout):
                acc = int(bias[o])
                for u in range(k):
                    for v in range(k):
                        yy, xv = y + u - p, xx + v - p
                        if 0 <= yy < h and 0 <= xv < w:
                            for i in range(cin):
                                acc += (int(xq[yy, xv, i]) - zin) * int(wq[o, u, v, i])
                scaled = Fraction(acc * int(mantissas[o])) * Fraction(2) ** (int(shifts[o]) - 31)
                q = round(scaled) + zout  # round() on Fraction is half-to-even
                out[y, xx, o] = min(qhi, max(qlo, q))
    return out


def scalar_psnr(a, b):
    a = np.asarray(a).ravel().tolist()
    b = np.asarray(b).ravel().tolist()
    s = 0.0
    for p, q in zip(a, b):
        s += (float(p) - float(q)) ** 2
    mse = s / len(a)
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(255.0**2 / mse))


def direct_ssim(a, b, size=11, sigma=1.5):
    """Windowed SSIM evaluated window by window from its defining formula."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    ax = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(ax**2) / (2 * sigma**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for ch in range(a.shape[2]):
        for y in range(a.shape[0] - size + 1):
            for x in range(a.shape[1] - size + 1):
                pa = a[y : y + size, x : x + size, ch]
                pb = b[y : y + size, x : x + size, ch]
                ma, mb = (win * pa).sum(), (win * pb).sum()
                va = (win * (pa - ma) ** 2).sum()
                vb = (win * (pb - mb) ** 2).sum()
                cov = (win * (pa - ma) * (pb - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def layer_params(layers):
    """Sum of k*k*in*out + out over (k, in, out) triples."""
    return sum(k * k * i * o + o for k, i, o in layers)
