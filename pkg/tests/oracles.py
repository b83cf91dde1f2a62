"""Independent brute-force evaluations of the metric definitions.

These deliberately use direct loops and two-pass statistics so they share no
code path with the library implementations they check.
"""

import math

import numpy as np


def brute_mae(a, b, sel):
    total, n = 0.0, 0
    for idx in np.argwhere(sel):
        i = tuple(idx)
        total += abs(float(a[i]) - float(b[i]))
        n += 1
    return total / n


def brute_psnr(a, b, sel, max_value, clip_lo=-1024.0, clip_hi=3071.0):
    total, n = 0.0, 0
    for idx in np.argwhere(sel):
        i = tuple(idx)
        av = min(max(float(a[i]), clip_lo), clip_hi)
        bv = min(max(float(b[i]), clip_lo), clip_hi)
        total += (av - bv) ** 2
        n += 1
    mse = total / n
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / mse)


def _window_values(arr, center, half):
    nx, ny, nz = arr.shape
    x, y, z = center
    vals = []
    for i in range(max(0, x - half), min(nx, x + half + 1)):
        for j in range(max(0, y - half), min(ny, y + half + 1)):
            for k in range(max(0, z - half), min(nz, z + half + 1)):
                vals.append(float(arr[i, j, k]))
    return vals


def brute_ssim_local(a, b, center, window_edge, c1, c2):
    """Direct single-window SSIM: two-pass population statistics."""
    half = window_edge // 2
    xs = _window_values(a, center, half)
    ys = _window_values(b, center, half)
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((v - mx) ** 2 for v in xs) / n
    vy = sum((v - my) ** 2 for v in ys) / n
    cov = sum((xv - mx) * (yv - my) for xv, yv in zip(xs, ys)) / n
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def brute_ssim(a, b, sel, window_edge, c1, c2):
    vals = [
        brute_ssim_local(a, b, tuple(idx), window_edge, c1, c2)
        for idx in np.argwhere(sel)
    ]
    return sum(vals) / len(vals)


def brute_dice(p_sel, g_sel):
    na = int(np.count_nonzero(p_sel))
    nb = int(np.count_nonzero(g_sel))
    if na + nb == 0:
        return 1.0
    inter = 0
    for idx in np.argwhere(p_sel):
        if g_sel[tuple(idx)]:
            inter += 1
    return 2.0 * inter / (na + nb)


def brute_cl(p_sel, g_sel, skel_p_points, skel_g_points):
    """Centerline precision/recall/dice from explicit point-by-point checks."""
    if len(skel_p_points):
        hit = sum(1 for pt in skel_p_points if g_sel[tuple(pt)])
        precision = hit / len(skel_p_points)
    else:
        precision = 0.0
    if len(skel_g_points):
        hit = sum(1 for pt in skel_g_points if p_sel[tuple(pt)])
        recall = hit / len(skel_g_points)
    else:
        recall = 0.0
    cl_dice = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, cl_dice


def brute_icc_2_1(a, b):
    """Two-way ANOVA mean squares from definitional sums of squares."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    n = len(a)
    k = 2
    table = [[a[i], b[i]] for i in range(n)]
    grand = sum(sum(row) for row in table) / (n * k)
    row_means = [sum(row) / k for row in table]
    col_means = [sum(table[i][j] for i in range(n)) / n for j in range(k)]
    ss_rows = k * sum((m - grand) ** 2 for m in row_means)
    ss_cols = n * sum((m - grand) ** 2 for m in col_means)
    ss_err = sum(
        (table[i][j] - row_means[i] - col_means[j] + grand) ** 2
        for i in range(n)
        for j in range(k)
    )
    ms_r = ss_rows / (n - 1)
    ms_c = ss_cols / (k - 1)
    ms_e = ss_err / ((n - 1) * (k - 1))
    denom = ms_r + (k - 1) * ms_e + (k / n) * (ms_c - ms_e)
    if denom == 0.0:
        return 1.0
    return (ms_r - ms_e) / denom


def rel_close(x, y, tol=1e-9):
    if math.isinf(x) or math.isinf(y):
        return x == y
    return abs(x - y) <= tol * max(1.0, abs(x), abs(y))
