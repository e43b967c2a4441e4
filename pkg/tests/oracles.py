"""Independent brute-force references used by several test modules."""

import numpy as np


def naive_correlate(x, k, pad):
    """Scalar-loop zero-padded correlation."""
    h, w = x.shape
    kh, kw = k.shape
    ph, pw = pad
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    out = np.zeros((ho, wo))
    for r in range(ho):
        for c in range(wo):
            s = 0.0
            for i in range(kh):
                for j in range(kw):
                    rr, cc = r + i - ph, c + j - pw
                    if 0 <= rr < h and 0 <= cc < w:
                        s += k[i, j] * x[rr, cc]
            out[r, c] = s
    return out


def naive_mrf(unaries, priors, biases):
    """Unnormalized single-round product, one pixel and one tap at a time.

    ``out[a, i, j] = prod_v (sum_{di,dj} prior[a,v][c+di, c+dj] * p_v[i-di, j-dj] + b[a,v])``
    i.e. a true convolution of the unary with the prior centred on the kernel.
    """
    n_out, n_in, k, _ = priors.shape
    _, h, w = unaries.shape
    c = k // 2
    out = np.ones((n_out, h, w))
    for a in range(n_out):
        for v in range(n_in):
            for i in range(h):
                for j in range(w):
                    s = 0.0
                    for di in range(-c, c + 1):
                        for dj in range(-c, c + 1):
                            si, sj = i - di, j - dj
                            if 0 <= si < h and 0 <= sj < w:
                                s += priors[a, v, c + di, c + dj] * unaries[v, si, sj]
                    out[a, i, j] *= s + biases[a, v]
    return out


def count_detections(errors, visible, r):
    """Per-joint hit fraction by explicit counting; nan when no visible sample."""
    n_img, n_j = len(errors), len(errors[0])
    rates = []
    for j in range(n_j):
        hits = total = 0
        for i in range(n_img):
            if visible[i][j]:
                total += 1
                if errors[i][j] <= r:
                    hits += 1
        rates.append(hits / total if total else float("nan"))
    return rates
