"""Reverse-mode gradients of the rendered color with respect to every
Gaussian parameter.

Two interchangeable pixel-stage variants produce per-(tile, Gaussian)
adjoints of (mean2d, conic, opacity, color):

* per-pixel: back-to-front recurrence pixel by pixel, scatter-added into
  shared per-tile slots (the atomic-add layout);
* per-Gaussian: rank-synchronous sweep where each (tile, Gaussian) pair owns
  a private reduction over the tile's pixels, merged once at the end.

Both feed one shared chain from screen space back to world-space parameters
(position, log scale, quaternion tangent, opacity logit, SH coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import (HAVE_NUMBA, TERMINATION_THRESHOLD, RenderTargets,
                      TileGrid, njit)
from .projection import (ALPHA_CLAMP, ALPHA_CUTOFF, SplatScreen,
                         projection_jacobian, quat_rot_backward, quat_to_rot,
                         sh_basis_grad)
from .scene import CameraIntrinsics, CameraPose, GaussianMap


@dataclass
class GradientBuffer:
    """Per-parameter gradients aligned with the GaussianMap layout."""

    d_position: np.ndarray      # (N, 3)
    d_log_scale: np.ndarray     # (N, 3)
    d_rotation: np.ndarray      # (N, 4) tangent-projected
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray            # (N, 16, 3)
    d_exposure: np.ndarray      # (3, 4)

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "GradientBuffer":
        return cls(
            d_position=np.zeros((n, 3), dtype=dtype),
            d_log_scale=np.zeros((n, 3), dtype=dtype),
            d_rotation=np.zeros((n, 4), dtype=dtype),
            d_opacity_logit=np.zeros((n,), dtype=dtype),
            d_sh=np.zeros((n, 16, 3), dtype=dtype),
            d_exposure=np.zeros((3, 4), dtype=dtype),
        )


@dataclass
class _PairAdjoints:
    """Screen-space adjoints accumulated per SplatScreen row."""

    d_mean2d: np.ndarray        # (M, 2)
    d_conic: np.ndarray         # (M, 2, 2) symmetric
    d_opacity: np.ndarray       # (M,) w.r.t. o (post-sigmoid)
    d_color: np.ndarray         # (M, 3)

    @classmethod
    def zeros(cls, m: int, dtype) -> "_PairAdjoints":
        return cls(np.zeros((m, 2), dtype), np.zeros((m, 2, 2), dtype),
                   np.zeros((m,), dtype), np.zeros((m, 3), dtype))


def _to_tiled(img: np.ndarray, grid: TileGrid) -> np.ndarray:
    """(H, W[, C]) image -> (n_tiles, ts*ts[, C]) tile-major blocks, zero pad."""
    ts = grid.tile_size
    H, W = img.shape[:2]
    pad_shape = (grid.tiles_y * ts, grid.tiles_x * ts) + img.shape[2:]
    padded = np.zeros(pad_shape, dtype=img.dtype)
    padded[:H, :W] = img
    chan = img.shape[2:]
    blocks = padded.reshape((grid.tiles_y, ts, grid.tiles_x, ts) + chan)
    blocks = blocks.transpose((0, 2, 1, 3) + tuple(range(4, 4 + len(chan))))
    return np.ascontiguousarray(blocks.reshape((grid.n_tiles, ts * ts) + chan))


def _tile_coords(grid: TileGrid, intr: CameraIntrinsics, dtype) -> np.ndarray:
    ts = grid.tile_size
    dr, dc = np.mgrid[0:ts, 0:ts]
    offs = np.stack([dc.ravel(), dr.ravel()], axis=1).astype(dtype)
    t_ids = np.arange(grid.n_tiles)
    base = np.stack([(t_ids % grid.tiles_x) * ts,
                     (t_ids // grid.tiles_x) * ts], axis=1).astype(dtype)
    return base[:, None, :] + offs[None, :, :]


@njit(cache=True)
def _backward_tiles(pair_gaussian, offsets, tiles_x, tile_size, width, height,
                    xs, ys, mean2d, inv_cov, color, opacity, radius, q_cut,
                    dc_img, c_final, early_termination, thresh, cutoff, clamp,
                    out_mean, out_conic, out_opacity,
                    out_color):  # pragma: no cover - compiled
    """Per-(tile, Gaussian) backward: each pair replays its pixels privately
    and merges once, in deterministic (tile, depth-rank) order."""
    n_tiles = offsets.shape[0] - 1
    one = clamp * 0 + 1
    half = one / 2
    two = one + one
    q_margin = one / 64
    npx = tile_size * tile_size
    T = np.empty(npx, dtype=xs.dtype)
    P0 = np.empty(npx, dtype=xs.dtype)
    P1 = np.empty(npx, dtype=xs.dtype)
    P2 = np.empty(npx, dtype=xs.dtype)
    for t in range(n_tiles):
        lo = offsets[t]
        hi = offsets[t + 1]
        if hi == lo:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)
        y_hi = min(y_lo + tile_size, height)
        w_t = x_hi - x_lo
        for i in range(npx):
            T[i] = one
            P0[i] = 0
            P1[i] = 0
            P2[i] = 0
        for k in range(lo, hi):
            g = pair_gaussian[k]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            r = radius[g]
            px0 = max(x_lo, int(np.ceil(mx - r)))
            px1 = min(x_hi - 1, int(np.floor(mx + r)))
            py0 = max(y_lo, int(np.ceil(my - r)))
            py1 = min(y_hi - 1, int(np.floor(my + r)))
            if px0 > px1 or py0 > py1:
                continue
            a = inv_cov[g, 0, 0]
            b = inv_cov[g, 0, 1]
            c = inv_cov[g, 1, 1]
            qc = q_cut[g] + q_margin
            opa = opacity[g]
            col0 = color[g, 0]
            col1 = color[g, 1]
            col2 = color[g, 2]
            # Private per-pair accumulators.
            acc_mx = one * 0
            acc_my = one * 0
            acc_aa = one * 0
            acc_ab = one * 0
            acc_cc = one * 0
            acc_o = one * 0
            acc_c0 = one * 0
            acc_c1 = one * 0
            acc_c2 = one * 0
            for py in range(py0, py1 + 1):
                dy = ys[py] - my
                qy = c * dy * dy
                bdy = two * b * dy
                row = (py - y_lo) * w_t - x_lo
                for px in range(px0, px1 + 1):
                    slot = row + px
                    trans = T[slot]
                    if early_termination and trans < thresh:
                        continue
                    dx = xs[px] - mx
                    q = a * dx * dx + bdy * dx + qy
                    if q > qc:
                        continue
                    gauss = np.exp(-(half * q))
                    alpha_raw = opa * gauss
                    alpha = alpha_raw
                    if alpha > clamp:
                        alpha = clamp
                    if alpha < cutoff:
                        continue
                    w = alpha * trans
                    wc0 = w * col0
                    wc1 = w * col1
                    wc2 = w * col2
                    p0 = P0[slot] + wc0
                    p1 = P1[slot] + wc1
                    p2 = P2[slot] + wc2
                    dc0 = dc_img[py, px, 0]
                    dc1 = dc_img[py, px, 1]
                    dc2 = dc_img[py, px, 2]
                    acc_c0 += w * dc0
                    acc_c1 += w * dc1
                    acc_c2 += w * dc2
                    if alpha_raw < clamp:
                        inv_rest = one / (one - alpha)
                        dalpha = (dc0 * (col0 * trans - (c_final[py, px, 0] - p0) * inv_rest)
                                  + dc1 * (col1 * trans - (c_final[py, px, 1] - p1) * inv_rest)
                                  + dc2 * (col2 * trans - (c_final[py, px, 2] - p2) * inv_rest))
                        acc_o += dalpha * gauss
                        dq = -(half * gauss * (dalpha * opa))
                        acc_mx += -(two * dq * (a * dx + b * dy))
                        acc_my += -(two * dq * (b * dx + c * dy))
                        acc_aa += dq * dx * dx
                        acc_ab += dq * dx * dy
                        acc_cc += dq * dy * dy
                    P0[slot] = p0
                    P1[slot] = p1
                    P2[slot] = p2
                    T[slot] = trans * (one - alpha)
            out_mean[g, 0] += acc_mx
            out_mean[g, 1] += acc_my
            out_conic[g, 0] += acc_aa
            out_conic[g, 1] += acc_ab
            out_conic[g, 2] += acc_cc
            out_opacity[g] += acc_o
            out_color[g, 0] += acc_c0
            out_color[g, 1] += acc_c1
            out_color[g, 2] += acc_c2


def _pixel_stage_per_gaussian(targets: RenderTargets, d_color_image: np.ndarray,
                              screen: SplatScreen, grid: TileGrid,
                              intr: CameraIntrinsics, early_termination: bool,
                              term_threshold: float) -> _PairAdjoints:
    m = len(screen)
    dt = screen.mean2d.dtype
    acc = _PairAdjoints.zeros(m, dt)
    if grid.n_pairs == 0:
        return acc
    if HAVE_NUMBA:
        out_mean = acc.d_mean2d
        out_conic = np.zeros((m, 3), dtype=dt)
        _backward_tiles(grid.pair_gaussian, grid.offsets, grid.tiles_x,
                        grid.tile_size, intr.width, intr.height,
                        np.arange(intr.width, dtype=dt),
                        np.arange(intr.height, dtype=dt),
                        screen.mean2d, screen.inv_cov2d,
                        np.ascontiguousarray(screen.color), screen.opacity,
                        screen.radius_cut, screen.q_cut,
                        np.ascontiguousarray(d_color_image.astype(dt, copy=False)),
                        np.ascontiguousarray(targets.color),
                        early_termination, dt.type(term_threshold),
                        dt.type(ALPHA_CUTOFF), dt.type(ALPHA_CLAMP),
                        out_mean, out_conic, acc.d_opacity, acc.d_color)
        acc.d_conic[:, 0, 0] = out_conic[:, 0]
        acc.d_conic[:, 0, 1] = out_conic[:, 1]
        acc.d_conic[:, 1, 0] = out_conic[:, 1]
        acc.d_conic[:, 1, 1] = out_conic[:, 2]
        return acc

    lengths = np.diff(grid.offsets)
    coords = _tile_coords(grid, intr, dt)
    dC = _to_tiled(d_color_image.astype(dt, copy=False), grid)
    C_final = _to_tiled(targets.color, grid)
    npx = grid.tile_size ** 2

    T = np.ones((grid.n_tiles, npx), dtype=dt)
    # Mirror the forward's invalid-pixel handling for edge tiles.
    px = coords[..., 0]
    py = coords[..., 1]
    T[(px > intr.width - 1) | (py > intr.height - 1)] = 0.0
    P = np.zeros((grid.n_tiles, npx, 3), dtype=dt)

    thresh = dt.type(term_threshold) if early_termination else dt.type(0.0)
    cutoff = dt.type(ALPHA_CUTOFF)
    clamp = dt.type(ALPHA_CLAMP)
    one = dt.type(1)

    alive = lengths > 0
    r = 0
    max_len = int(lengths.max())
    while r < max_len:
        proc = np.nonzero(alive & (lengths > r))[0]
        if proc.size == 0:
            break
        g = grid.pair_gaussian[grid.offsets[proc] + r]
        mu = screen.mean2d[g]
        inv = screen.inv_cov2d[g]
        col = screen.color[g]
        opa = screen.opacity[g]

        d = coords[proc] - mu[:, None, :]
        dx, dy = d[..., 0], d[..., 1]
        a = inv[:, 0, 0, None]
        b = inv[:, 0, 1, None]
        c = inv[:, 1, 1, None]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        G = np.exp(dt.type(-0.5) * q)
        alpha_raw = opa[:, None] * G
        alpha = np.minimum(alpha_raw, clamp)
        Tp = T[proc]
        if early_termination:
            contrib = (alpha >= cutoff) & (Tp >= thresh)
        else:
            contrib = (alpha >= cutoff) & (Tp > 0)
        ac = np.where(contrib, alpha, dt.type(0))
        w = ac * Tp
        P_new = P[proc] + w[..., None] * col[:, None, :]
        suffix = C_final[proc] - P_new

        dCp = dC[proc]
        dalpha = (dCp * (col[:, None, :] * Tp[..., None]
                         - suffix / (one - ac)[..., None])).sum(axis=2)
        dalpha = np.where(contrib, dalpha, dt.type(0))

        # Private per-(tile, Gaussian) reductions over the tile's pixels.
        # A Gaussian can hold the same rank in several tiles, so the merge
        # into shared rows must accumulate duplicates (np.add.at).
        np.add.at(acc.d_color, g, np.einsum("np,npc->nc", w, dCp))
        active = contrib & (alpha_raw < clamp)
        da = np.where(active, dalpha, dt.type(0))
        np.add.at(acc.d_opacity, g, (da * G).sum(axis=1))
        dG = da * opa[:, None]
        dq = dt.type(-0.5) * G * dG
        gx = dq * (a * dx + b * dy)
        gy = dq * (b * dx + c * dy)
        dmean = np.stack([dt.type(-2.0) * gx.sum(axis=1),
                          dt.type(-2.0) * gy.sum(axis=1)], axis=1)
        np.add.at(acc.d_mean2d, g, dmean)
        daa = (dq * dx * dx).sum(axis=1)
        dab = (dq * dx * dy).sum(axis=1)
        dcc = (dq * dy * dy).sum(axis=1)
        dcon = np.empty((g.shape[0], 2, 2), dtype=dt)
        dcon[:, 0, 0] = daa
        dcon[:, 0, 1] = dab
        dcon[:, 1, 0] = dab
        dcon[:, 1, 1] = dcc
        np.add.at(acc.d_conic, g, dcon)

        T[proc] = Tp * (one - ac)
        P[proc] = P_new
        if early_termination:
            alive[proc] = (T[proc] >= thresh).any(axis=1)
        r += 1
    return acc


def _pixel_stage_per_pixel(targets: RenderTargets, d_color_image: np.ndarray,
                           screen: SplatScreen, grid: TileGrid,
                           intr: CameraIntrinsics, early_termination: bool,
                           term_threshold: float) -> _PairAdjoints:
    m = len(screen)
    dt = screen.mean2d.dtype
    acc = _PairAdjoints.zeros(m, dt)
    if grid.n_pairs == 0:
        return acc

    ts = grid.tile_size
    thresh = dt.type(term_threshold) if early_termination else dt.type(0.0)
    cutoff = dt.type(ALPHA_CUTOFF)
    clamp = dt.type(ALPHA_CLAMP)
    one = dt.type(1)
    dC_img = d_color_image.astype(dt, copy=False)

    for tid in range(grid.n_tiles):
        lo, hi = grid.offsets[tid], grid.offsets[tid + 1]
        if hi == lo:
            continue
        g = grid.pair_gaussian[lo:hi]
        mu = screen.mean2d[g]
        inv = screen.inv_cov2d[g]
        col = screen.color[g]
        opa = screen.opacity[g]
        a, b, c = inv[:, 0, 0], inv[:, 0, 1], inv[:, 1, 1]

        tx, ty = tid % grid.tiles_x, tid // grid.tiles_x
        x_lo, y_lo = tx * ts, ty * ts
        d_mean = np.zeros((len(g), 2), dt)
        d_con = np.zeros((len(g), 3), dt)
        d_op = np.zeros(len(g), dt)
        d_col = np.zeros((len(g), 3), dt)

        for row in range(y_lo, min(y_lo + ts, intr.height)):
            for colx in range(x_lo, min(x_lo + ts, intr.width)):
                dCp = dC_img[row, colx]
                px, py = dt.type(colx), dt.type(row)
                dx = px - mu[:, 0]
                dy = py - mu[:, 1]
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                G = np.exp(dt.type(-0.5) * q)
                alpha_raw = opa * G
                alpha = np.minimum(alpha_raw, clamp)
                ac0 = np.where(alpha >= cutoff, alpha, dt.type(0))
                Tvec = np.empty_like(ac0)
                Tvec[0] = one
                np.cumprod(one - ac0[:-1], out=Tvec[1:])
                contrib = ac0 > 0
                if early_termination:
                    contrib &= Tvec >= thresh
                acv = np.where(contrib, ac0, dt.type(0))
                w = acv * Tvec
                wc = w[:, None] * col
                pre = np.cumsum(wc, axis=0)
                suffix = pre[-1] - pre
                dalpha = (dCp[None, :] * (col * Tvec[:, None]
                                          - suffix / (one - acv)[:, None])).sum(axis=1)
                dalpha = np.where(contrib, dalpha, dt.type(0))

                d_col += w[:, None] * dCp[None, :]
                active = contrib & (alpha_raw < clamp)
                da = np.where(active, dalpha, dt.type(0))
                d_op += da * G
                dq = dt.type(-0.5) * G * (da * opa)
                d_mean[:, 0] += dt.type(-2.0) * dq * (a * dx + b * dy)
                d_mean[:, 1] += dt.type(-2.0) * dq * (b * dx + c * dy)
                d_con[:, 0] += dq * dx * dx
                d_con[:, 1] += dq * dx * dy
                d_con[:, 2] += dq * dy * dy

        acc.d_mean2d[g] += d_mean
        acc.d_conic[g, 0, 0] += d_con[:, 0]
        acc.d_conic[g, 0, 1] += d_con[:, 1]
        acc.d_conic[g, 1, 0] += d_con[:, 1]
        acc.d_conic[g, 1, 1] += d_con[:, 2]
        acc.d_opacity[g] += d_op
        acc.d_color[g] += d_col
    return acc


def _chain_to_parameters(acc: _PairAdjoints, screen: SplatScreen,
                         gmap: GaussianMap, pose: CameraPose,
                         intr: CameraIntrinsics) -> GradientBuffer:
    """Chain screen-space adjoints back to world-space Gaussian parameters."""
    dt = screen.mean2d.dtype
    buf = GradientBuffer.zeros(gmap.count, dtype=dt)
    m = len(screen)
    if m == 0:
        return buf
    idx = screen.source_index
    W = pose.rotation_wc.astype(dt)
    fx, fy = dt.type(intr.fx), dt.type(intr.fy)

    # conic -> dilated 2D covariance: dSigma' = -M dM M (M symmetric).
    Minv = screen.inv_cov2d
    dSig2 = -np.einsum("nij,njk,nkl->nil", Minv, acc.d_conic, Minv)

    # Sigma' = T2 Sigma T2^T + dilation, T2 = J W with J at the guard-clamped
    # camera-space mean; the mean itself projects through the true point.
    t = screen.t_cam
    tc = screen.t_clamped
    J_mean = projection_jacobian(t, intr.fx, intr.fy)
    J = projection_jacobian(tc, intr.fx, intr.fy)
    T2 = J @ W[None]
    q_unit = gmap.rotations[idx]
    q_unit = q_unit / np.sqrt((q_unit * q_unit).sum(axis=1, keepdims=True))
    R = quat_to_rot(q_unit)
    s = np.exp(gmap.log_scales[idx])
    M3 = R * s[:, None, :]
    cov3d = M3 @ np.swapaxes(M3, 1, 2)

    dT2 = 2.0 * dSig2 @ T2 @ cov3d
    dJ = dT2 @ W.T[None]
    dSigma = np.swapaxes(T2, 1, 2) @ dSig2 @ T2

    # Projection mean and Jacobian both pull the camera-space point. Through
    # the Jacobian the clamped coordinate xc is an intermediate: beyond the
    # guard band it stops tracking x and scales with z instead (subgradient
    # convention through the clamp).
    dt_cam = np.einsum("nji,nj->ni", J_mean, acc.d_mean2d)
    xc, yc, z = tc[:, 0], tc[:, 1], tc[:, 2]
    z2 = z * z
    z3 = z2 * z
    d_xc = dJ[:, 0, 2] * (-fx / z2)
    d_yc = dJ[:, 1, 2] * (-fy / z2)
    free_x = ~screen.clamped_x
    free_y = ~screen.clamped_y
    dt_cam[:, 0] += np.where(free_x, d_xc, 0)
    dt_cam[:, 1] += np.where(free_y, d_yc, 0)
    dt_cam[:, 2] += (dJ[:, 0, 0] * (-fx / z2) + dJ[:, 1, 1] * (-fy / z2)
                     + dJ[:, 0, 2] * (2 * fx * xc / z3)
                     + dJ[:, 1, 2] * (2 * fy * yc / z3)
                     + np.where(free_x, 0, d_xc * (xc / z))
                     + np.where(free_y, 0, d_yc * (yc / z)))
    d_pos = dt_cam @ W

    # Sigma = M3 M3^T with M3 = R diag(s).
    dM3 = 2.0 * dSigma @ M3
    dR = dM3 * s[:, None, :]
    ds = np.einsum("nij,nij->nj", R, dM3)
    d_log_scale = ds * s
    d_quat = quat_rot_backward(q_unit, dR)

    # SH color and the view-direction pull on position.
    color_mask = (screen.color_raw > 0).astype(dt)
    d_raw = acc.d_color * color_mask
    d_sh = screen.basis[:, :, None] * d_raw[:, None, :]
    coeffs = gmap.sh_coeffs[idx]
    d_basis = np.einsum("nkc,nc->nk", coeffs, d_raw)
    bgrad = sh_basis_grad(screen.view_dir)
    d_dir = np.einsum("nk,nkj->nj", d_basis, bgrad)
    cam_center = pose.camera_center().astype(dt)
    v = gmap.positions[idx] - cam_center
    vnorm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    radial = (d_dir * screen.view_dir).sum(axis=1, keepdims=True)
    d_pos += (d_dir - radial * screen.view_dir) / vnorm

    o = screen.opacity
    d_logit = acc.d_opacity * o * (1 - o)

    np.add.at(buf.d_position, idx, d_pos)
    np.add.at(buf.d_log_scale, idx, d_log_scale)
    np.add.at(buf.d_rotation, idx, d_quat)
    np.add.at(buf.d_opacity_logit, idx, d_logit)
    np.add.at(buf.d_sh, idx, d_sh)
    return buf


def backward_per_pixel(targets: RenderTargets, d_color_image: np.ndarray,
                       screen: SplatScreen, grid: TileGrid, gmap: GaussianMap,
                       pose: CameraPose, intr: CameraIntrinsics,
                       early_termination: bool = True,
                       term_threshold: float = TERMINATION_THRESHOLD) -> GradientBuffer:
    """Baseline backward: per-pixel back-to-front recurrences."""
    if targets.n_contrib is None:
        raise ValueError("render targets carry no backward state")
    acc = _pixel_stage_per_pixel(targets, d_color_image, screen, grid, intr,
                                 early_termination, term_threshold)
    return _chain_to_parameters(acc, screen, gmap, pose, intr)


def backward_per_gaussian(targets: RenderTargets, d_color_image: np.ndarray,
                          screen: SplatScreen, grid: TileGrid, gmap: GaussianMap,
                          pose: CameraPose, intr: CameraIntrinsics,
                          early_termination: bool = True,
                          term_threshold: float = TERMINATION_THRESHOLD) -> GradientBuffer:
    """Accelerated backward: work parallelized over (tile, Gaussian) pairs,
    each owning a private reduction over the tile's pixels."""
    if targets.n_contrib is None:
        raise ValueError("render targets carry no backward state")
    acc = _pixel_stage_per_gaussian(targets, d_color_image, screen, grid, intr,
                                    early_termination, term_threshold)
    return _chain_to_parameters(acc, screen, gmap, pose, intr)


# --- finite-difference verification -----------------------------------------

@dataclass
class FiniteDifferenceReport:
    worst_rel_error: float
    worst_param: str
    per_group: dict = field(default_factory=dict)
    n_checked: int = 0

    def __str__(self) -> str:
        lines = [f"finite-difference check over {self.n_checked} scalars"]
        for name, err in sorted(self.per_group.items()):
            lines.append(f"  {name:<16s} max rel err {err:.3e}")
        lines.append(f"worst: {self.worst_param} ({self.worst_rel_error:.3e})")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, abs_floor: float = 1e-7) -> float:
    diff = abs(analytic - numeric)
    if diff <= abs_floor:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), abs_floor)


def finite_difference_check(params: dict, loss_fn, analytic: dict,
                            epsilon: float = 1e-5,
                            abs_floor: float = 1e-7) -> FiniteDifferenceReport:
    """Central-difference every scalar in ``params`` against ``analytic``.

    ``loss_fn(params) -> float`` must be pure; parameter arrays are perturbed
    in place and restored. Gradients known to be exactly zero pass via the
    absolute floor.
    """
    worst = 0.0
    worst_name = "none"
    per_group = {}
    n = 0
    for name, arr in params.items():
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        group_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_fn(params)
            flat[i] = orig - epsilon
            f_minus = loss_fn(params)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = relative_error(float(gflat[i]), fd, abs_floor)
            n += 1
            if err > group_worst:
                group_worst = err
            if err > worst:
                worst = err
                worst_name = f"{name}[{i}]"
        per_group[name] = group_worst
    return FiniteDifferenceReport(worst_rel_error=worst, worst_param=worst_name,
                                  per_group=per_group, n_checked=n)
