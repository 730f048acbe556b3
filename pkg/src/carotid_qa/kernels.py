"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names at the bottom of the module are bound to one flavour at
import time according to ``carotid_qa._accel.USE_NUMBA``. Both flavours stay
importable (``*_nb`` / ``*_np``) so tests and the benchmark can compare them.

Array conventions:

* images are ``(nz, ny, nx)`` float32, x fastest;
* polar samples are ``(n_angles, n_radii, n_slices)``;
* network activations are ``(batch, channels, angle, slice, radius)`` with the
  radius axis contiguous. Convolutions are circular along angle, zero-padded
  along radius and "valid" along slice.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit

KA = 3  # angular kernel extent
KR = 5  # radial kernel extent
PAD_A = KA // 2
PAD_R = KR // 2


# ---------------------------------------------------------------------------
# polar sampling
# ---------------------------------------------------------------------------

@njit
def polar_sample_nb(img, cx, cy, cz, cos_t, sin_t, n_radii, half):
    nz, ny, nx = img.shape
    n_ang = cos_t.shape[0]
    n_sl = 2 * half + 1
    out = np.empty((n_ang, n_radii, n_sl), dtype=np.float64)
    xmax = nx - 1.0
    ymax = ny - 1.0
    for i in range(n_ang):
        for k in range(n_radii):
            x = cx + (k + 1) * cos_t[i]
            y = cy + (k + 1) * sin_t[i]
            x = min(max(x, 0.0), xmax)
            y = min(max(y, 0.0), ymax)
            x0 = min(int(math.floor(x)), max(nx - 2, 0))
            y0 = min(int(math.floor(y)), max(ny - 2, 0))
            x1 = min(x0 + 1, nx - 1)
            y1 = min(y0 + 1, ny - 1)
            fx = x - x0
            fy = y - y0
            for s in range(n_sl):
                z = cz - half + s
                v00 = np.float64(img[z, y0, x0])
                v01 = np.float64(img[z, y0, x1])
                v10 = np.float64(img[z, y1, x0])
                v11 = np.float64(img[z, y1, x1])
                # lerp form: exact on constant fields and at voxel centres
                top = v00 + fx * (v01 - v00)
                bot = v10 + fx * (v11 - v10)
                out[i, k, s] = top + fy * (bot - top)
    return out


def polar_sample_np(img, cx, cy, cz, cos_t, sin_t, n_radii, half):
    nz, ny, nx = img.shape
    k = np.arange(1, n_radii + 1, dtype=np.float64)
    x = np.clip(cx + k[None, :] * cos_t[:, None], 0.0, nx - 1.0)
    y = np.clip(cy + k[None, :] * sin_t[:, None], 0.0, ny - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(nx - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(ny - 2, 0))
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = x - x0
    fy = y - y0
    sl = img[cz - half:cz + half + 1].astype(np.float64)
    top = sl[:, y0, x0] + fx * (sl[:, y0, x1] - sl[:, y0, x0])
    bot = sl[:, y1, x0] + fx * (sl[:, y1, x1] - sl[:, y1, x0])
    out = top + fy * (bot - top)
    return np.ascontiguousarray(out.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# even-odd rasterization (pixel centres at integer coordinates)
# ---------------------------------------------------------------------------

@njit
def rasterize_nb(xs, ys, width, height):
    mask = np.zeros((height, width), dtype=np.bool_)
    n = xs.shape[0]
    cross = np.empty(n, dtype=np.float64)
    for j in range(height):
        y = float(j)
        m = 0
        for e in range(n):
            x0 = xs[e]
            y0 = ys[e]
            x1 = xs[(e + 1) % n]
            y1 = ys[(e + 1) % n]
            if (y0 > y) != (y1 > y):
                cross[m] = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                m += 1
        if m == 0:
            continue
        c = np.sort(cross[:m])
        for p in range(0, m - 1, 2):
            lo = max(int(math.ceil(c[p])), 0)
            hi = min(int(math.ceil(c[p + 1])), width)
            for i in range(lo, hi):
                mask[j, i] = True
    return mask


def rasterize_np(xs, ys, width, height):
    mask = np.zeros((height, width), dtype=bool)
    if width == 0 or height == 0:
        return mask
    gx = np.arange(width, dtype=np.float64)[None, :]
    parity = np.zeros((height, width), dtype=bool)
    yrow = np.arange(height, dtype=np.float64)[:, None]
    x0, y0 = xs, ys
    x1, y1 = np.roll(xs, -1), np.roll(ys, -1)
    for e in range(xs.shape[0]):
        crosses = (y0[e] > yrow) != (y1[e] > yrow)  # (height, 1)
        if not crosses.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0[e] + (yrow - y0[e]) * (x1[e] - x0[e]) / (y1[e] - y0[e])
        parity ^= crosses & (np.ceil(xi) <= gx)
    mask[:] = parity
    return mask


# ---------------------------------------------------------------------------
# anti-aliased ellipse coverage
# ---------------------------------------------------------------------------

@njit
def ellipse_coverage_nb(x0, y0, width, height, cx, cy, a, b, phi, ss):
    out = np.zeros((height, width), dtype=np.float64)
    c = math.cos(phi)
    s = math.sin(phi)
    inv = 1.0 / (ss * ss)
    for j in range(height):
        for i in range(width):
            hit = 0
            for q in range(ss):
                dy = y0 + j - 0.5 + (q + 0.5) / ss - cy
                for p in range(ss):
                    dx = x0 + i - 0.5 + (p + 0.5) / ss - cx
                    u = dx * c + dy * s
                    v = -dx * s + dy * c
                    if (u / a) * (u / a) + (v / b) * (v / b) < 1.0:
                        hit += 1
            out[j, i] = hit * inv
    return out


def ellipse_coverage_np(x0, y0, width, height, cx, cy, a, b, phi, ss):
    off = -0.5 + (np.arange(ss) + 0.5) / ss
    px = x0 + np.arange(width)[:, None] + off[None, :]  # (w, ss)
    py = y0 + np.arange(height)[:, None] + off[None, :]  # (h, ss)
    dx = px[None, None, :, :] - cx  # (1,1,w,ss)
    dy = py[:, :, None, None] - cy  # (h,ss,1,1)
    c, s = math.cos(phi), math.sin(phi)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (u / a) * (u / a) + (v / b) * (v / b) < 1.0  # (h,ssy,w,ssx)
    return inside.sum(axis=(1, 3)) / float(ss * ss)


# ---------------------------------------------------------------------------
# convolution: circular angle, zero-padded radius, valid slice
# ---------------------------------------------------------------------------

def pad_activation(x, pad_a=PAD_A, pad_r=PAD_R):
    """Wrap the angle axis circularly and zero-pad the radius axis."""
    xa = np.concatenate([x[:, :, x.shape[2] - pad_a:], x, x[:, :, :pad_a]], axis=2) if pad_a else x
    return np.pad(xa, ((0, 0), (0, 0), (0, 0), (0, 0), (pad_r, pad_r)))


def fold_padded_grad(gxp, n_ang, pad_a=PAD_A, pad_r=PAD_R):
    """Adjoint of :func:`pad_activation`."""
    g = gxp[:, :, :, :, pad_r:gxp.shape[4] - pad_r]
    gx = g[:, :, pad_a:pad_a + n_ang].copy()
    if pad_a:
        gx[:, :, n_ang - pad_a:] += g[:, :, :pad_a]
        gx[:, :, :pad_a] += g[:, :, pad_a + n_ang:]
    return gx


@njit
def conv_forward_nb(xp, w, bias):
    nb, nc, ap, sp, rp = xp.shape
    no, _, ka, ks, kr = w.shape
    na = ap - ka + 1
    ns = sp - ks + 1
    nr = rp - kr + 1
    out = np.empty((nb, no, na, ns, nr), dtype=xp.dtype)
    for b in range(nb):
        for o in range(no):
            out[b, o] = bias[o]
            for c in range(nc):
                for da in range(ka):
                    for ds in range(ks):
                        for dr in range(kr):
                            wv = w[o, c, da, ds, dr]
                            for a in range(na):
                                for s in range(ns):
                                    for r in range(nr):
                                        out[b, o, a, s, r] += wv * xp[b, c, a + da, s + ds, r + dr]
    return out


@njit
def conv_grad_input_nb(gout, w, padded_shape):
    nb, no, na, ns, nr = gout.shape
    _, nc, ka, ks, kr = w.shape
    gxp = np.zeros(padded_shape, dtype=gout.dtype)
    for b in range(nb):
        for o in range(no):
            for c in range(nc):
                for da in range(ka):
                    for ds in range(ks):
                        for dr in range(kr):
                            wv = w[o, c, da, ds, dr]
                            for a in range(na):
                                for s in range(ns):
                                    for r in range(nr):
                                        gxp[b, c, a + da, s + ds, r + dr] += wv * gout[b, o, a, s, r]
    return gxp


@njit
def conv_grad_weight_nb(xp, gout, kshape):
    nb, no, na, ns, nr = gout.shape
    nc = xp.shape[1]
    ka, ks, kr = kshape
    gw = np.zeros((no, nc, ka, ks, kr), dtype=np.float64)
    acc = np.empty(nr, dtype=gout.dtype)  # per-radius partial sums keep the inner loop vectorisable
    for o in range(no):
        for c in range(nc):
            for da in range(ka):
                for ds in range(ks):
                    for dr in range(kr):
                        acc[:] = 0.0
                        for b in range(nb):
                            for a in range(na):
                                for s in range(ns):
                                    for r in range(nr):
                                        acc[r] += gout[b, o, a, s, r] * xp[b, c, a + da, s + ds, r + dr]
                        gw[o, c, da, ds, dr] = acc.astype(np.float64).sum()
    return gw.astype(gout.dtype)


def conv_forward_np(xp, w, bias):
    nb, nc, ap, sp, rp = xp.shape
    no, _, ka, ks, kr = w.shape
    na, ns, nr = ap - ka + 1, sp - ks + 1, rp - kr + 1
    out = np.empty((nb, no, na, ns, nr), dtype=xp.dtype)
    out[:] = bias.reshape(1, no, 1, 1, 1)
    for da in range(ka):
        for ds in range(ks):
            for dr in range(kr):
                xs = xp[:, :, da:da + na, ds:ds + ns, dr:dr + nr]
                out += np.einsum("oc,bcasr->boasr", w[:, :, da, ds, dr], xs)
    return out


def conv_grad_input_np(gout, w, padded_shape):
    nb, no, na, ns, nr = gout.shape
    _, nc, ka, ks, kr = w.shape
    gxp = np.zeros(padded_shape, dtype=gout.dtype)
    for da in range(ka):
        for ds in range(ks):
            for dr in range(kr):
                gxp[:, :, da:da + na, ds:ds + ns, dr:dr + nr] += np.einsum(
                    "oc,boasr->bcasr", w[:, :, da, ds, dr], gout)
    return gxp


def conv_grad_weight_np(xp, gout, kshape):
    nb, no, na, ns, nr = gout.shape
    nc = xp.shape[1]
    ka, ks, kr = kshape
    gw = np.zeros((no, nc, ka, ks, kr), dtype=gout.dtype)
    g2 = gout.transpose(1, 0, 2, 3, 4).reshape(no, -1)
    for da in range(ka):
        for ds in range(ks):
            for dr in range(kr):
                xs = xp[:, :, da:da + na, ds:ds + ns, dr:dr + nr]
                gw[:, :, da, ds, dr] = g2 @ xs.transpose(1, 0, 2, 3, 4).reshape(nc, -1).T
    return gw


if USE_NUMBA:
    polar_sample = polar_sample_nb
    rasterize = rasterize_nb
    ellipse_coverage = ellipse_coverage_nb
    conv_forward = conv_forward_nb
    conv_grad_input = conv_grad_input_nb
    conv_grad_weight = conv_grad_weight_nb
else:
    polar_sample = polar_sample_np
    rasterize = rasterize_np
    ellipse_coverage = ellipse_coverage_np
    conv_forward = conv_forward_np
    conv_grad_input = conv_grad_input_np
    conv_grad_weight = conv_grad_weight_np
