"""Independent reference implementations used to verify the library.

Everything here is deliberately written the slow, obvious way (scalar loops,
direct summation) and never calls into the library's compute paths.
"""

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=(1, 1), pad=((0, 0), (0, 0)), groups=1):
    """Naive direct convolution: quadruple loop plus kernel loops."""
    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    sh, sw = stride
    (ph0, ph1), (pw0, pw1) = pad
    oh = (h + ph0 + ph1 - kh) // sh + 1
    ow = (wd + pw0 + pw1 - kw) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    out = np.zeros((n, oc, oh, ow), np.float64)
    ocg = oc // groups
    for ni in range(n):
        for o in range(oc):
            g = o // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += (xp[ni, g * cg + ci, i * sh + a,
                                           j * sw + bb]
                                        * w[o, ci, a, bb])
                    out[ni, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def maxpool_loop(x, kernel, stride):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((n, c, oh, ow), x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[ni, ci, i, j] = x[ni, ci, i * sh:i * sh + kh,
                                          j * sw:j * sw + kw].max()
    return out


def linear_loop(x, w, b=None):
    lead = x.shape[:-1]
    xf = x.reshape(-1, x.shape[-1])
    out = np.zeros((xf.shape[0], w.shape[0]), np.float64)
    for r in range(xf.shape[0]):
        for o in range(w.shape[0]):
            acc = 0.0
            for i in range(x.shape[-1]):
                acc += xf[r, i] * w[o, i]
            out[r, o] = acc + (b[o] if b is not None else 0.0)
    return out.reshape(lead + (w.shape[0],))


def bilinear2x_loop(x):
    """Evaluate the half-pixel formula coordinate by coordinate."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), np.float64)
    for d in range(2 * h):
        sy = min(max((d + 0.5) / 2 - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for e in range(2 * w):
            sx = min(max((e + 0.5) / 2 - 0.5, 0.0), w - 1.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            out[:, :, d, e] = ((1 - wy) * (1 - wx) * x[:, :, y0, x0]
                               + (1 - wy) * wx * x[:, :, y0, x1]
                               + wy * (1 - wx) * x[:, :, y1, x0]
                               + wy * wx * x[:, :, y1, x1])
    return out


def s6_recurrence(u, delta, A, B, C, D):
    """Step-by-step scalar recurrence for a single [L, d_inner] sequence."""
    L, d = u.shape
    s = B.shape[1]
    h = [[0.0] * s for _ in range(d)]
    out = np.zeros((L, d), np.float64)
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for j in range(s):
                dA = math.exp(delta[t][i] * A[i][j])
                h[i][j] = dA * h[i][j] + delta[t][i] * B[t][j] * u[t][i]
                acc += C[t][j] * h[i][j]
            out[t, i] = acc + D[i] * u[t][i]
    return out


def scan_orders(h, w):
    """Index permutations of the four scan directions over a row-major grid."""
    flat = np.arange(h * w).reshape(h, w)
    d0 = flat.reshape(-1)
    d1 = flat.T.reshape(-1)
    return [d0, d1, d0[::-1], d1[::-1]]


def boundary_loop(mask):
    """Foreground pixels with a 4-neighbor outside the mask (border counts)."""
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = (i == 0 or j == 0 or i == h - 1 or j == w - 1
                    or not mask[i - 1, j] or not mask[i + 1, j]
                    or not mask[i, j - 1] or not mask[i, j + 1])
            if edge:
                pts.append((i, j))
    return pts


def hd_percentile_loop(pred, gt, spacing=(1.0, 1.0), percentile=0.95):
    """All-pairs nearest-distance pooling with ceil-index selection."""
    a = boundary_loop(pred)
    b = boundary_loop(gt)
    if not a or not b:
        return None
    sy, sx = spacing

    def nearest(p, qs):
        best = math.inf
        for q in qs:
            d = math.sqrt(((p[0] - q[0]) * sy) ** 2 + ((p[1] - q[1]) * sx) ** 2)
            best = min(best, d)
        return best

    dists = sorted([nearest(p, b) for p in a] + [nearest(q, a) for q in b])
    idx = max(int(math.ceil(percentile * len(dists))) - 1, 0)
    return dists[idx]


def dsc_loop(pred, gt):
    p = g = inter = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p += bool(pred[i, j])
            g += bool(gt[i, j])
            inter += bool(pred[i, j]) and bool(gt[i, j])
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    return 2.0 * inter / (p + g)


def soft_dice_loop(logits, labels, smooth=1.0):
    """Direct-summation soft Dice loss on f64 softmax probabilities."""
    n, k, h, w = logits.shape
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    p = e / e.sum(axis=1, keepdims=True)
    total = 0.0
    for cls in range(k):
        inter = psum = gsum = 0.0
        for ni in range(n):
            for i in range(h):
                for j in range(w):
                    g = 1.0 if labels[ni, i, j] == cls else 0.0
                    inter += p[ni, cls, i, j] * g
                    psum += p[ni, cls, i, j]
                    gsum += g
        total += (2.0 * inter + smooth) / (psum + gsum + smooth)
    return 1.0 - total / k


def ce_loop(logits, labels):
    n, k, h, w = logits.shape
    total = 0.0
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                row = logits[ni, :, i, j]
                m = row.max()
                lse = m + math.log(np.exp(row - m).sum())
                total += lse - row[int(labels[ni, i, j])]
    return total / (n * h * w)


def bottleneck_params(in_ch, width, out_ch, stride):
    """Closed-form parameter count of one encoder bottleneck block."""
    n = in_ch * width + width * width * 9 + width * out_ch
    n += 2 * width + 2 * width + 2 * out_ch          # bn1, bn2, bn3 affine
    if stride != 1 or in_ch != out_ch:
        n += in_ch * out_ch + 2 * out_ch             # projection + bn
    return n


def tiny_model_params(C=4, num_classes=2):
    """Closed-form count for the hand-countable configuration:
    depths (1, 1, 1), no scan blocks, no wavelet modules."""
    total = 7 * 7 * 3 * C + 2 * C                    # stem conv + bn
    total += bottleneck_params(C, C, 4 * C, 1)
    total += bottleneck_params(4 * C, 2 * C, 8 * C, 2)
    total += bottleneck_params(8 * C, 4 * C, 16 * C, 2)

    def dwconv(cin, cout):
        return cin * 9 + cin * cout + cout           # depthwise + pointwise

    def resblock(ch):
        mid = min(ch, max(32, ch // 4))
        return (ch * mid + 2 * mid + mid * mid * 9 + 2 * mid
                + mid * ch + 2 * ch)

    def upblock(c_prev, c_skip):
        reduce = c_prev * c_skip + c_skip
        return reduce + dwconv(2 * c_skip, c_skip) + resblock(c_skip)

    total += upblock(16 * C, 8 * C)
    total += upblock(8 * C, 4 * C)
    total += upblock(4 * C, C)
    total += dwconv(C, C) + C * num_classes + num_classes   # head
    return total
