"""Compiled numerical kernels (numba).

All volume arrays are float32 with shape (nz, ny, nx); displacement fields
are float64 with shape (nz, ny, nx, 3) storing (ux, uy, uz) in mm.  Kernels
are single-threaded and release the GIL, so callers may parallelize across
subjects with ordinary threads without nesting issues.
"""

from __future__ import annotations

import numpy as np
from numba import njit

F32 = np.float32
F64 = np.float64

NCC_RADIUS = 2
VAR_EPS = 1e-12


# ---------------------------------------------------------------------------
# Trilinear interpolation cores
# ---------------------------------------------------------------------------

@njit(inline="always")
def _tri_index(vals, tx, ty, tz, fill):
    """Sample at continuous index coords; outside the center hull -> fill."""
    nz, ny, nx = vals.shape
    if tx < 0.0 or ty < 0.0 or tz < 0.0:
        return fill
    if tx > nx - 1.0 or ty > ny - 1.0 or tz > nz - 1.0:
        return fill
    if nx == 1:
        i0 = 0
        fx = 0.0
    else:
        i0 = int(tx)
        if i0 > nx - 2:
            i0 = nx - 2
        fx = tx - i0
    if ny == 1:
        j0 = 0
        fy = 0.0
    else:
        j0 = int(ty)
        if j0 > ny - 2:
            j0 = ny - 2
        fy = ty - j0
    if nz == 1:
        k0 = 0
        fz = 0.0
    else:
        k0 = int(tz)
        if k0 > nz - 2:
            k0 = nz - 2
        fz = tz - k0
    i1 = i0 + 1 if nx > 1 else i0
    j1 = j0 + 1 if ny > 1 else j0
    k1 = k0 + 1 if nz > 1 else k0

    c000 = vals[k0, j0, i0]
    c100 = vals[k0, j0, i1]
    c010 = vals[k0, j1, i0]
    c110 = vals[k0, j1, i1]
    c001 = vals[k1, j0, i0]
    c101 = vals[k1, j0, i1]
    c011 = vals[k1, j1, i0]
    c111 = vals[k1, j1, i1]

    c00 = c000 * (1.0 - fx) + c100 * fx
    c01 = c001 * (1.0 - fx) + c101 * fx
    c10 = c010 * (1.0 - fx) + c110 * fx
    c11 = c011 * (1.0 - fx) + c111 * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@njit(inline="always")
def _tri_index_clamped(vals, tx, ty, tz):
    """Sample at continuous index coords, clamping to the center hull."""
    nz, ny, nx = vals.shape
    if tx < 0.0:
        tx = 0.0
    elif tx > nx - 1.0:
        tx = nx - 1.0
    if ty < 0.0:
        ty = 0.0
    elif ty > ny - 1.0:
        ty = ny - 1.0
    if tz < 0.0:
        tz = 0.0
    elif tz > nz - 1.0:
        tz = nz - 1.0
    return _tri_index(vals, tx, ty, tz, 0.0)


@njit(cache=True, nogil=True)
def trilinear_point(vals, px, py, pz, ox, oy, oz, sx, sy, sz, fill):
    return _tri_index(
        vals, (px - ox) / sx, (py - oy) / sy, (pz - oz) / sz, fill
    )


@njit(cache=True, nogil=True)
def warp_volume(flt, fox, foy, foz, fsx, fsy, fsz, fill,
                u, rox, roy, roz, rsx, rsy, rsz):
    """out(x) = flt(x + u(x)) sampled on the reference grid."""
    nz, ny, nx = u.shape[0], u.shape[1], u.shape[2]
    out = np.empty((nz, ny, nx), dtype=F32)
    for k in range(nz):
        pz = roz + k * rsz
        for j in range(ny):
            py = roy + j * rsy
            for i in range(nx):
                px = rox + i * rsx
                qx = px + u[k, j, i, 0]
                qy = py + u[k, j, i, 1]
                qz = pz + u[k, j, i, 2]
                out[k, j, i] = _tri_index(
                    flt,
                    (qx - fox) / fsx, (qy - foy) / fsy, (qz - foz) / fsz,
                    fill,
                )
    return out


@njit(cache=True, nogil=True)
def warp_labels_nearest(lab, fox, foy, foz, fsx, fsy, fsz,
                        u, rox, roy, roz, rsx, rsy, rsz):
    """Nearest-neighbor label warp; outside the floating domain -> 0."""
    nz, ny, nx = u.shape[0], u.shape[1], u.shape[2]
    fnz, fny, fnx = lab.shape
    out = np.zeros((nz, ny, nx), dtype=lab.dtype)
    for k in range(nz):
        pz = roz + k * rsz
        for j in range(ny):
            py = roy + j * rsy
            for i in range(nx):
                px = rox + i * rsx
                tx = (px + u[k, j, i, 0] - fox) / fsx
                ty = (py + u[k, j, i, 1] - foy) / fsy
                tz = (pz + u[k, j, i, 2] - foz) / fsz
                ii = int(np.round(tx))
                jj = int(np.round(ty))
                kk = int(np.round(tz))
                if 0 <= ii < fnx and 0 <= jj < fny and 0 <= kk < fnz:
                    out[k, j, i] = lab[kk, jj, ii]
    return out


@njit(cache=True, nogil=True)
def resample_field(u_src, sox, soy, soz, ssx, ssy, ssz,
                   dnx, dny, dnz, dox, doy, doz, dsx, dsy, dsz):
    """Trilinearly resample a displacement field onto a destination grid.

    Sampling is clamped to the source center hull, so constant fields are
    reproduced exactly.
    """
    out = np.empty((dnz, dny, dnx, 3), dtype=F64)
    for k in range(dnz):
        pz = doz + k * dsz
        tz = (pz - soz) / ssz
        for j in range(dny):
            py = doy + j * dsy
            ty = (py - soy) / ssy
            for i in range(dnx):
                px = dox + i * dsx
                tx = (px - sox) / ssx
                for c in range(3):
                    out[k, j, i, c] = _tri_index_clamped(
                        u_src[:, :, :, c], tx, ty, tz
                    )
    return out


# ---------------------------------------------------------------------------
# Median filter (border-truncated cubic window)
# ---------------------------------------------------------------------------

@njit(inline="always")
def _select_kth(buf, n, kth):
    """Hoare quickselect: puts the kth order statistic at buf[kth]."""
    lo = 0
    hi = n - 1
    while lo < hi:
        pivot = buf[(lo + hi) >> 1]
        a = lo
        b = hi
        while a <= b:
            while buf[a] < pivot:
                a += 1
            while buf[b] > pivot:
                b -= 1
            if a <= b:
                tmp = buf[a]
                buf[a] = buf[b]
                buf[b] = tmp
                a += 1
                b -= 1
        if kth <= b:
            hi = b
        elif kth >= a:
            lo = a
        else:
            break
    return buf[kth]


@njit(cache=True, nogil=True)
def median_filter_3d(vals, radius):
    nz, ny, nx = vals.shape
    out = np.empty((nz, ny, nx), dtype=F32)
    side = 2 * radius + 1
    buf = np.empty(side * side * side, dtype=F32)
    for k in range(nz):
        k0 = max(0, k - radius)
        k1 = min(nz - 1, k + radius)
        for j in range(ny):
            j0 = max(0, j - radius)
            j1 = min(ny - 1, j + radius)
            for i in range(nx):
                i0 = max(0, i - radius)
                i1 = min(nx - 1, i + radius)
                n = 0
                for kk in range(k0, k1 + 1):
                    for jj in range(j0, j1 + 1):
                        for ii in range(i0, i1 + 1):
                            buf[n] = vals[kk, jj, ii]
                            n += 1
                lo_k = (n - 1) // 2
                med = _select_kth(buf, n, lo_k)
                if n % 2 == 0:
                    # second central order statistic = min of the right part
                    hi = buf[lo_k + 1]
                    for t in range(lo_k + 2, n):
                        if buf[t] < hi:
                            hi = buf[t]
                    med = F32(0.5) * (med + hi)
                out[k, j, i] = med
    return out


# ---------------------------------------------------------------------------
# Registration data costs
# ---------------------------------------------------------------------------
#
# The data term is pointwise in each voxel's displacement: intensity cost is
# 1 - NCC between the reference window at x and the floating window rigidly
# shifted by u(x); mask costs are squared differences of fuzzily warped mask
# values.  This makes the term decomposable over voxels, which the binary
# graph-cut moves require, and is the exact functional reported by the
# energy bookkeeping.


@njit(cache=True, nogil=True)
def _data_cost_voxel(i, j, k,
                     ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                     flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                     rox, roy, roz, rsx, rsy, rsz,
                     fox, foy, foz, fsx, fsy, fsz,
                     int_fill, ux, uy, uz,
                     w_img, w0, w1, w2, w3):
    nz, ny, nx = ref_int.shape
    px = rox + i * rsx + ux
    py = roy + j * rsy + uy
    pz = roz + k * rsz + uz

    cost = 0.0
    if w0 != 0.0 or w1 != 0.0 or w2 != 0.0 or w3 != 0.0:
        tx = (px - fox) / fsx
        ty = (py - foy) / fsy
        tz = (pz - foz) / fsz
        if w0 != 0.0:
            d = ref_m0[k, j, i] - _tri_index(flt_m0, tx, ty, tz, 0.0)
            cost += w0 * d * d
        if w1 != 0.0:
            d = ref_m1[k, j, i] - _tri_index(flt_m1, tx, ty, tz, 0.0)
            cost += w1 * d * d
        if w2 != 0.0:
            d = ref_m2[k, j, i] - _tri_index(flt_m2, tx, ty, tz, 0.0)
            cost += w2 * d * d
        if w3 != 0.0:
            d = ref_m3[k, j, i] - _tri_index(flt_m3, tx, ty, tz, 0.0)
            cost += w3 * d * d

    if w_img != 0.0:
        r = NCC_RADIUS
        i0 = max(0, i - r)
        i1 = min(nx - 1, i + r)
        j0 = max(0, j - r)
        j1 = min(ny - 1, j + r)
        k0 = max(0, k - r)
        k1 = min(nz - 1, k + r)
        n = 0.0
        sa = 0.0
        saa = 0.0
        sb = 0.0
        sbb = 0.0
        sab = 0.0
        for kk in range(k0, k1 + 1):
            bz = (pz + (kk - k) * rsz - foz) / fsz
            for jj in range(j0, j1 + 1):
                by = (py + (jj - j) * rsy - foy) / fsy
                for ii in range(i0, i1 + 1):
                    bx = (px + (ii - i) * rsx - fox) / fsx
                    a = float(ref_int[kk, jj, ii])
                    b = float(_tri_index(flt_int, bx, by, bz, int_fill))
                    n += 1.0
                    sa += a
                    saa += a * a
                    sb += b
                    sbb += b * b
                    sab += a * b
        ma = sa / n
        mb = sb / n
        var_a = saa / n - ma * ma
        var_b = sbb / n - mb * mb
        a_flat = var_a < VAR_EPS
        b_flat = var_b < VAR_EPS
        if a_flat and b_flat:
            pass  # two flat windows: vacuous agreement, no penalty
        elif a_flat or b_flat:
            # structure against a flat (or out-of-domain) window: treat the
            # undefined correlation as 0, i.e. the full penalty; otherwise
            # stepping outside the floating volume would erase data cost
            cost += w_img
        else:
            ncc = (sab / n - ma * mb) / np.sqrt(var_a * var_b)
            cost += w_img * (1.0 - ncc)
    return cost


@njit(cache=True, nogil=True)
def data_cost_map(ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                  flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                  rox, roy, roz, rsx, rsy, rsz,
                  fox, foy, foz, fsx, fsy, fsz,
                  int_fill, u, ddx, ddy, ddz,
                  w_img, w0, w1, w2, w3, out):
    nz, ny, nx = ref_int.shape
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                out[k, j, i] = _data_cost_voxel(
                    i, j, k,
                    ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                    flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                    rox, roy, roz, rsx, rsy, rsz,
                    fox, foy, foz, fsx, fsy, fsz,
                    int_fill,
                    u[k, j, i, 0] + ddx, u[k, j, i, 1] + ddy,
                    u[k, j, i, 2] + ddz,
                    w_img, w0, w1, w2, w3,
                )


@njit(cache=True, nogil=True)
def data_cost_at(indices, n_idx,
                 ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                 flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                 rox, roy, roz, rsx, rsy, rsz,
                 fox, foy, foz, fsx, fsy, fsz,
                 int_fill, u, ddx, ddy, ddz,
                 w_img, w0, w1, w2, w3, out):
    """Refresh the cost map at the given linear voxel indices only."""
    nz, ny, nx = ref_int.shape
    for t in range(n_idx):
        lin = indices[t]
        k = lin // (ny * nx)
        rem = lin - k * ny * nx
        j = rem // nx
        i = rem - j * nx
        out[k, j, i] = _data_cost_voxel(
            i, j, k,
            ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
            flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
            rox, roy, roz, rsx, rsy, rsz,
            fox, foy, foz, fsx, fsy, fsz,
            int_fill,
            u[k, j, i, 0] + ddx, u[k, j, i, 1] + ddy, u[k, j, i, 2] + ddz,
            w_img, w0, w1, w2, w3,
        )


@njit(cache=True, nogil=True)
def data_cost_sums(ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                   flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                   rox, roy, roz, rsx, rsy, rsz,
                   fox, foy, foz, fsx, fsy, fsz,
                   int_fill, u,
                   w_img, w0, w1, w2, w3):
    """Per-channel weighted data-term sums (image, then the 4 masks)."""
    nz, ny, nx = ref_int.shape
    out = np.zeros(5, dtype=F64)
    zero = 0.0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                ux = u[k, j, i, 0]
                uy = u[k, j, i, 1]
                uz = u[k, j, i, 2]
                if w_img != 0.0:
                    out[0] += _data_cost_voxel(
                        i, j, k,
                        ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                        flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                        rox, roy, roz, rsx, rsy, rsz,
                        fox, foy, foz, fsx, fsy, fsz,
                        int_fill, ux, uy, uz,
                        w_img, zero, zero, zero, zero,
                    )
                out[1] += _data_cost_voxel(
                    i, j, k,
                    ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                    flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                    rox, roy, roz, rsx, rsy, rsz,
                    fox, foy, foz, fsx, fsy, fsz,
                    int_fill, ux, uy, uz,
                    zero, w0, zero, zero, zero,
                )
                out[2] += _data_cost_voxel(
                    i, j, k,
                    ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                    flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                    rox, roy, roz, rsx, rsy, rsz,
                    fox, foy, foz, fsx, fsy, fsz,
                    int_fill, ux, uy, uz,
                    zero, zero, w1, zero, zero,
                )
                out[3] += _data_cost_voxel(
                    i, j, k,
                    ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                    flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                    rox, roy, roz, rsx, rsy, rsz,
                    fox, foy, foz, fsx, fsy, fsz,
                    int_fill, ux, uy, uz,
                    zero, zero, zero, w2, zero,
                )
                out[4] += _data_cost_voxel(
                    i, j, k,
                    ref_int, ref_m0, ref_m1, ref_m2, ref_m3,
                    flt_int, flt_m0, flt_m1, flt_m2, flt_m3,
                    rox, roy, roz, rsx, rsy, rsz,
                    fox, foy, foz, fsx, fsy, fsz,
                    int_fill, ux, uy, uz,
                    zero, zero, zero, zero, w3,
                )
    return out


@njit(cache=True, nogil=True)
def reg_energy(u, rsx, rsy, rsz):
    """Sum over 6-neighborhood edges of ||u_p - u_q||^2 / dist^2 (unweighted)."""
    nz, ny, nx = u.shape[0], u.shape[1], u.shape[2]
    total = 0.0
    wx = 1.0 / (rsx * rsx)
    wy = 1.0 / (rsy * rsy)
    wz = 1.0 / (rsz * rsz)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if i + 1 < nx:
                    dx = u[k, j, i, 0] - u[k, j, i + 1, 0]
                    dy = u[k, j, i, 1] - u[k, j, i + 1, 1]
                    dz = u[k, j, i, 2] - u[k, j, i + 1, 2]
                    total += wx * (dx * dx + dy * dy + dz * dz)
                if j + 1 < ny:
                    dx = u[k, j, i, 0] - u[k, j + 1, i, 0]
                    dy = u[k, j, i, 1] - u[k, j + 1, i, 1]
                    dz = u[k, j, i, 2] - u[k, j + 1, i, 2]
                    total += wy * (dx * dx + dy * dy + dz * dz)
                if k + 1 < nz:
                    dx = u[k, j, i, 0] - u[k + 1, j, i, 0]
                    dy = u[k, j, i, 1] - u[k + 1, j, i, 1]
                    dz = u[k, j, i, 2] - u[k + 1, j, i, 2]
                    total += wz * (dx * dx + dy * dy + dz * dz)
    return total


# ---------------------------------------------------------------------------
# Max-flow (Dinic) on block graphs
# ---------------------------------------------------------------------------

@njit(inline="always")
def _add_edge(eto, ecap, enxt, ehead, cnt, a, b, cab, cba):
    eto[cnt] = b
    ecap[cnt] = cab
    enxt[cnt] = ehead[a]
    ehead[a] = cnt
    cnt += 1
    eto[cnt] = a
    ecap[cnt] = cba
    enxt[cnt] = ehead[b]
    ehead[b] = cnt
    cnt += 1
    return cnt


@njit(cache=True, nogil=True)
def _dinic(n_nodes, s, t, ehead, enxt, eto, ecap, eps,
           level, itbuf, queue, stk_node, stk_arc):
    """Max-flow; on return ecap holds residual capacities."""
    flow = 0.0
    while True:
        # BFS level graph
        for v in range(n_nodes):
            level[v] = -1
        level[s] = 0
        qh = 0
        qt = 0
        queue[qt] = s
        qt += 1
        while qh < qt:
            v = queue[qh]
            qh += 1
            e = ehead[v]
            while e != -1:
                w = eto[e]
                if level[w] < 0 and ecap[e] > eps:
                    level[w] = level[v] + 1
                    queue[qt] = w
                    qt += 1
                e = enxt[e]
        if level[t] < 0:
            return flow
        for v in range(n_nodes):
            itbuf[v] = ehead[v]
        # DFS blocking flow (iterative, current-arc)
        while True:
            # find augmenting path s -> t in level graph
            top = 0
            stk_node[0] = s
            found = False
            while top >= 0:
                v = stk_node[top]
                if v == t:
                    found = True
                    break
                e = itbuf[v]
                advanced = False
                while e != -1:
                    w = eto[e]
                    if ecap[e] > eps and level[w] == level[v] + 1:
                        itbuf[v] = e
                        stk_arc[top] = e
                        top += 1
                        stk_node[top] = w
                        advanced = True
                        break
                    e = enxt[e]
                if not advanced:
                    itbuf[v] = -1
                    level[v] = -1  # dead end
                    top -= 1
            if not found:
                break
            # bottleneck along the stack path
            bott = np.inf
            for d in range(top):
                e = stk_arc[d]
                if ecap[e] < bott:
                    bott = ecap[e]
            for d in range(top):
                e = stk_arc[d]
                ecap[e] -= bott
                ecap[e ^ 1] += bott
            flow += bott
    return flow


@njit(cache=True, nogil=True)
def sweep_pass(u, data_keep, data_move,
               ddx, ddy, ddz, lam,
               rsx, rsy, rsz,
               block, off,
               ehead, enxt, eto, ecap, level, itbuf, queue,
               stk_node, stk_arc,
               c0buf, c1buf, nodelab,
               flip_out, block_de_out):
    """One pass of binary block moves for candidate step (ddx, ddy, ddz).

    Blocks tile the grid starting at -off; each is solved exactly by
    max-flow and applied only if the block-local energy strictly decreases.
    Returns (number of flipped voxels, number of blocks, total energy delta).
    Flipped linear voxel indices are written to flip_out; per-block energy
    deltas to block_de_out.
    """
    nz, ny, nx = data_keep.shape
    wx = lam / (rsx * rsx)
    wy = lam / (rsy * rsy)
    wz = lam / (rsz * rsz)

    n_flips = 0
    n_blocks = 0
    total_de = 0.0

    bz0 = -off
    while bz0 < nz:
        z0 = max(0, bz0)
        z1 = min(nz, bz0 + block)
        by0 = -off
        while by0 < ny:
            y0 = max(0, by0)
            y1 = min(ny, by0 + block)
            bx0 = -off
            while bx0 < nx:
                x0 = max(0, bx0)
                x1 = min(nx, bx0 + block)
                bnx = x1 - x0
                bny = y1 - y0
                bnz = z1 - z0
                bn = bnx * bny * bnz

                # ---- raw unaries and quick screen -------------------------
                gain_ub = 0.0
                pair_cur = 0.0
                for k in range(z0, z1):
                    for j in range(y0, y1):
                        for i in range(x0, x1):
                            node = ((k - z0) * bny + (j - y0)) * bnx + (i - x0)
                            c0 = data_keep[k, j, i]
                            c1 = data_move[k, j, i]
                            # boundary-fixed and out-of-block neighbor terms
                            for d in range(6):
                                if d == 0:
                                    qi, qj, qk, w = i + 1, j, k, wx
                                elif d == 1:
                                    qi, qj, qk, w = i - 1, j, k, wx
                                elif d == 2:
                                    qi, qj, qk, w = i, j + 1, k, wy
                                elif d == 3:
                                    qi, qj, qk, w = i, j - 1, k, wy
                                elif d == 4:
                                    qi, qj, qk, w = i, j, k + 1, wz
                                else:
                                    qi, qj, qk, w = i, j, k - 1, wz
                                if qi < 0 or qi >= nx or qj < 0 or qj >= ny \
                                        or qk < 0 or qk >= nz:
                                    continue
                                inside = (x0 <= qi < x1 and y0 <= qj < y1
                                          and z0 <= qk < z1)
                                ex = u[k, j, i, 0] - u[qk, qj, qi, 0]
                                ey = u[k, j, i, 1] - u[qk, qj, qi, 1]
                                ez = u[k, j, i, 2] - u[qk, qj, qi, 2]
                                a_term = w * (ex * ex + ey * ey + ez * ez)
                                if inside:
                                    # counted once per edge for the screen
                                    if d == 0 or d == 2 or d == 4:
                                        pair_cur += a_term
                                else:
                                    c0 += a_term
                                    mx = ex + ddx
                                    my = ey + ddy
                                    mz = ez + ddz
                                    c1 += w * (mx * mx + my * my + mz * mz)
                            c0buf[node] = c0
                            c1buf[node] = c1
                            if c1 < c0:
                                gain_ub += c0 - c1
                if gain_ub + pair_cur <= 0.0:
                    block_de_out[n_blocks] = 0.0
                    n_blocks += 1
                    bx0 += block
                    continue

                # ---- build graph ------------------------------------------
                s = bn
                t = bn + 1
                for v in range(bn + 2):
                    ehead[v] = -1
                cnt = 0
                # internal pairwise edges (positive directions only)
                for k in range(z0, z1):
                    for j in range(y0, y1):
                        for i in range(x0, x1):
                            node = ((k - z0) * bny + (j - y0)) * bnx + (i - x0)
                            for d in range(3):
                                if d == 0:
                                    qi, qj, qk, w = i + 1, j, k, wx
                                elif d == 1:
                                    qi, qj, qk, w = i, j + 1, k, wy
                                else:
                                    qi, qj, qk, w = i, j, k + 1, wz
                                if qi >= x1 or qj >= y1 or qk >= z1:
                                    continue
                                qnode = ((qk - z0) * bny + (qj - y0)) * bnx \
                                    + (qi - x0)
                                ex = u[k, j, i, 0] - u[qk, qj, qi, 0]
                                ey = u[k, j, i, 1] - u[qk, qj, qi, 1]
                                ez = u[k, j, i, 2] - u[qk, qj, qi, 2]
                                a_t = w * (ex * ex + ey * ey + ez * ez)
                                bxv = ex - ddx
                                byv = ey - ddy
                                bzv = ez - ddz
                                b_t = w * (bxv * bxv + byv * byv + bzv * bzv)
                                cxv = ex + ddx
                                cyv = ey + ddy
                                czv = ez + ddz
                                c_t = w * (cxv * cxv + cyv * cyv + czv * czv)
                                # E(p,q) = A + (C-A) x_p + (A-C) x_q
                                #          + (B+C-2A) (1-x_p) x_q
                                c1buf[node] += c_t - a_t
                                c1buf[qnode] += a_t - c_t
                                wcap = b_t + c_t - 2.0 * a_t
                                if wcap > 0.0:
                                    cnt = _add_edge(eto, ecap, enxt, ehead,
                                                    cnt, node, qnode,
                                                    wcap, 0.0)
                # t-links
                maxcap = 0.0
                for v in range(bn):
                    net = c1buf[v] - c0buf[v]
                    if net > 0.0:
                        cnt = _add_edge(eto, ecap, enxt, ehead, cnt,
                                        s, v, net, 0.0)
                        if net > maxcap:
                            maxcap = net
                    elif net < 0.0:
                        cnt = _add_edge(eto, ecap, enxt, ehead, cnt,
                                        v, t, -net, 0.0)
                        if -net > maxcap:
                            maxcap = -net
                for e in range(cnt):
                    if ecap[e] > maxcap:
                        maxcap = ecap[e]
                eps = 1e-14 * maxcap

                _dinic(bn + 2, s, t, ehead, enxt, eto, ecap, eps,
                       level, itbuf, queue, stk_node, stk_arc)

                # residual reachability from s: reachable -> keep (label 0)
                for v in range(bn + 2):
                    nodelab[v] = 0
                nodelab[s] = 1
                qh = 0
                qt = 0
                queue[qt] = s
                qt += 1
                while qh < qt:
                    v = queue[qh]
                    qh += 1
                    e = ehead[v]
                    while e != -1:
                        w2 = eto[e]
                        if nodelab[w2] == 0 and ecap[e] > eps:
                            nodelab[w2] = 1
                            queue[qt] = w2
                            qt += 1
                        e = enxt[e]
                # x_v = 1 (move) iff not reachable from s
                # ---- exact block energy delta -----------------------------
                de = 0.0
                any_move = False
                for k in range(z0, z1):
                    for j in range(y0, y1):
                        for i in range(x0, x1):
                            node = ((k - z0) * bny + (j - y0)) * bnx + (i - x0)
                            moved = nodelab[node] == 0
                            if moved:
                                any_move = True
                                de += data_move[k, j, i] - data_keep[k, j, i]
                            # pairwise: positive dirs inside grid
                            for d in range(3):
                                if d == 0:
                                    qi, qj, qk, w = i + 1, j, k, wx
                                elif d == 1:
                                    qi, qj, qk, w = i, j + 1, k, wy
                                else:
                                    qi, qj, qk, w = i, j, k + 1, wz
                                if qi >= nx or qj >= ny or qk >= nz:
                                    continue
                                q_in = (x0 <= qi < x1 and y0 <= qj < y1
                                        and z0 <= qk < z1)
                                if q_in:
                                    qnode = ((qk - z0) * bny + (qj - y0)) \
                                        * bnx + (qi - x0)
                                    qmoved = nodelab[qnode] == 0
                                else:
                                    qmoved = False
                                if not moved and not qmoved:
                                    continue
                                ex = u[k, j, i, 0] - u[qk, qj, qi, 0]
                                ey = u[k, j, i, 1] - u[qk, qj, qi, 1]
                                ez = u[k, j, i, 2] - u[qk, qj, qi, 2]
                                old = w * (ex * ex + ey * ey + ez * ez)
                                if moved:
                                    ex += ddx
                                    ey += ddy
                                    ez += ddz
                                if qmoved:
                                    ex -= ddx
                                    ey -= ddy
                                    ez -= ddz
                                new = w * (ex * ex + ey * ey + ez * ez)
                                de += new - old
                            # negative-direction edges to voxels outside block
                            for d in range(3):
                                if d == 0:
                                    qi, qj, qk, w = i - 1, j, k, wx
                                elif d == 1:
                                    qi, qj, qk, w = i, j - 1, k, wy
                                else:
                                    qi, qj, qk, w = i, j, k - 1, wz
                                if qi < 0 or qj < 0 or qk < 0:
                                    continue
                                if x0 <= qi < x1 and y0 <= qj < y1 \
                                        and z0 <= qk < z1:
                                    continue  # handled as internal
                                if not moved:
                                    continue
                                ex = u[k, j, i, 0] - u[qk, qj, qi, 0] + ddx
                                ey = u[k, j, i, 1] - u[qk, qj, qi, 1] + ddy
                                ez = u[k, j, i, 2] - u[qk, qj, qi, 2] + ddz
                                exo = ex - ddx
                                eyo = ey - ddy
                                ezo = ez - ddz
                                de += w * ((ex * ex + ey * ey + ez * ez)
                                           - (exo * exo + eyo * eyo
                                              + ezo * ezo))

                if any_move and de < 0.0:
                    for k in range(z0, z1):
                        for j in range(y0, y1):
                            for i in range(x0, x1):
                                node = ((k - z0) * bny + (j - y0)) * bnx \
                                    + (i - x0)
                                if nodelab[node] == 0:
                                    u[k, j, i, 0] += ddx
                                    u[k, j, i, 1] += ddy
                                    u[k, j, i, 2] += ddz
                                    data_keep[k, j, i] = data_move[k, j, i]
                                    flip_out[n_flips] = (k * ny + j) * nx + i
                                    n_flips += 1
                    total_de += de
                    block_de_out[n_blocks] = de
                else:
                    block_de_out[n_blocks] = 0.0
                n_blocks += 1
                bx0 += block
            by0 += block
        bz0 += block
    return n_flips, n_blocks, total_de


# ---------------------------------------------------------------------------
# SLIC supervoxel passes
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def slic_assign(vals, cx, cy, cz, ci, seed_spacing, compactness,
                labels, dist):
    """Assign voxels to the nearest cluster within each cluster's window.

    Clusters are scanned in label order with strict-less updates, so ties
    deterministically go to the lowest label.
    """
    nz, ny, nx = vals.shape
    K = cx.size
    S = float(seed_spacing)
    m_over_s = compactness / S
    for t in range(K):
        x0 = max(0, int(np.floor(cx[t] - S)))
        x1 = min(nx - 1, int(np.ceil(cx[t] + S)))
        y0 = max(0, int(np.floor(cy[t] - S)))
        y1 = min(ny - 1, int(np.ceil(cy[t] + S)))
        z0 = max(0, int(np.floor(cz[t] - S)))
        z1 = min(nz - 1, int(np.ceil(cz[t] + S)))
        for k in range(z0, z1 + 1):
            dz = k - cz[t]
            for j in range(y0, y1 + 1):
                dy = j - cy[t]
                for i in range(x0, x1 + 1):
                    dx = i - cx[t]
                    dc = float(vals[k, j, i]) - ci[t]
                    ds2 = dx * dx + dy * dy + dz * dz
                    d2 = dc * dc + (m_over_s * m_over_s) * ds2
                    if d2 < dist[k, j, i]:
                        dist[k, j, i] = d2
                        labels[k, j, i] = t + 1


@njit(cache=True, nogil=True)
def slic_update(vals, labels, K):
    """Mean position/intensity per cluster; returns (cnt, sx, sy, sz, si)."""
    nz, ny, nx = vals.shape
    cnt = np.zeros(K, dtype=F64)
    sx = np.zeros(K, dtype=F64)
    sy = np.zeros(K, dtype=F64)
    sz = np.zeros(K, dtype=F64)
    si = np.zeros(K, dtype=F64)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                t = labels[k, j, i] - 1
                if t >= 0:
                    cnt[t] += 1.0
                    sx[t] += i
                    sy[t] += j
                    sz[t] += k
                    si[t] += vals[k, j, i]
    return cnt, sx, sy, sz, si


@njit(cache=True, nogil=True)
def slic_assign_orphans(vals, cx, cy, cz, ci, seed_spacing, compactness,
                        labels, dist):
    """Assign any voxel missed by the windowed pass to its best cluster."""
    nz, ny, nx = vals.shape
    K = cx.size
    S = float(seed_spacing)
    m_over_s = compactness / S
    n_orphans = 0
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if labels[k, j, i] != 0:
                    continue
                best = np.inf
                best_t = 0
                for t in range(K):
                    dx = i - cx[t]
                    dy = j - cy[t]
                    dz = k - cz[t]
                    dc = float(vals[k, j, i]) - ci[t]
                    d2 = dc * dc + (m_over_s * m_over_s) * (
                        dx * dx + dy * dy + dz * dz)
                    if d2 < best:
                        best = d2
                        best_t = t + 1
                labels[k, j, i] = best_t
                dist[k, j, i] = best
                n_orphans += 1
    return n_orphans
