"""Tiled forward rasterization of color, depth, and opacity images.

Compositing runs tile by tile with per-pixel front-to-back blending and
early termination, compiled with numba when available (the CPU realization
of the per-tile device kernels); a vectorized numpy path computes the same
thing otherwise. A per-Gaussian streaming reference renderer (no tiling, no
culling, no early termination) serves as the oracle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap

from .projection import ALPHA_CLAMP, ALPHA_CUTOFF, ProjectedGaussian, SplatScreen
from .scene import CameraIntrinsics

DEFAULT_TILE_SIZE = 16
TERMINATION_THRESHOLD = 1e-4


@dataclass
class TileGrid:
    """Depth-sorted (tile, Gaussian) pairs in CSR layout."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    pair_gaussian: np.ndarray   # (P,) rows into the SplatScreen
    pair_tile: np.ndarray       # (P,) flat tile ids, sorted ascending
    offsets: np.ndarray         # (tiles_x*tiles_y + 1,) CSR offsets

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @property
    def n_pairs(self) -> int:
        return self.pair_gaussian.shape[0]

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.pair_gaussian[self.offsets[t]:self.offsets[t + 1]]


@dataclass
class RenderTargets:
    """Rendered images plus the per-pixel state the backward pass needs."""

    color: np.ndarray           # (H, W, 3)
    depth: np.ndarray           # (H, W)
    opacity: np.ndarray         # (H, W)
    transmittance: np.ndarray   # (H, W) final transmittance (= 1 - opacity)
    n_contrib: np.ndarray       # (H, W) int32 composited contributor count


def _tile_rects(tile_ids, tiles_x, tile_size, width, height, dtype):
    """Tile rectangles [x0, x1] x [y0, y1] in pixel-center coordinates."""
    ty, tx = np.divmod(tile_ids, tiles_x)
    x0 = (tx * tile_size).astype(dtype)
    y0 = (ty * tile_size).astype(dtype)
    x1 = np.minimum(x0 + tile_size - 1, dtype(width - 1))
    y1 = np.minimum(y0 + tile_size - 1, dtype(height - 1))
    return x0, x1, y0, y1


def _min_mahalanobis_sq(mean2d, inv_cov, x0, x1, y0, y1):
    """Exact minimum of d^T M d over each rectangle (interior, then the four
    edges with the stationary point clamped, which also covers corners)."""
    mx, my = mean2d[:, 0], mean2d[:, 1]
    a = inv_cov[:, 0, 0]
    b = inv_cov[:, 0, 1]
    c = inv_cov[:, 1, 1]

    def q_at(px, py):
        dx = px - mx
        dy = py - my
        return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy

    big = np.finfo(mean2d.dtype).max
    qmin = np.full(mx.shape, big, dtype=mean2d.dtype)
    inside = (mx >= x0) & (mx <= x1) & (my >= y0) & (my <= y1)
    qmin[inside] = 0.0

    with np.errstate(divide="ignore", invalid="ignore"):
        for xe in (x0, x1):
            ys = np.clip(my - (b / c) * (xe - mx), y0, y1)
            qmin = np.minimum(qmin, q_at(xe, ys))
        for ye in (y0, y1):
            xs = np.clip(mx - (b / a) * (ye - my), x0, x1)
            qmin = np.minimum(qmin, q_at(xs, ye))
    return qmin


@njit(cache=True)
def _cull_pairs(gauss, tile_ids, tiles_x, tile_size, xs, ys,
                mean2d, inv_cov, q_cut, keep):  # pragma: no cover - compiled
    """Exact per-pair tile test: keep iff min over the tile rectangle of the
    Mahalanobis form stays within the 1/255 bound (max alpha >= 1/255)."""
    width = xs.shape[0]
    height = ys.shape[0]
    for i in range(gauss.shape[0]):
        g = gauss[i]
        t = tile_ids[i]
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = xs[tx * tile_size]
        x1 = xs[min(tx * tile_size + tile_size - 1, width - 1)]
        y0 = ys[ty * tile_size]
        y1 = ys[min(ty * tile_size + tile_size - 1, height - 1)]
        mx = mean2d[g, 0]
        my = mean2d[g, 1]
        if x0 <= mx <= x1 and y0 <= my <= y1:
            keep[i] = True
            continue
        a = inv_cov[g, 0, 0]
        b = inv_cov[g, 0, 1]
        c = inv_cov[g, 1, 1]
        qmin = np.inf
        for xe in (x0, x1):
            yv = my - (b / c) * (xe - mx)
            if yv < y0:
                yv = y0
            elif yv > y1:
                yv = y1
            dx = xe - mx
            dy = yv - my
            q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
            if q < qmin:
                qmin = q
        for ye in (y0, y1):
            xv = mx - (b / a) * (ye - my)
            if xv < x0:
                xv = x0
            elif xv > x1:
                xv = x1
            dx = xv - mx
            dy = ye - my
            q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
            if q < qmin:
                qmin = q
        keep[i] = qmin <= q_cut[g]


def cull_tiles(pg: ProjectedGaussian, candidate_tiles, intr: CameraIntrinsics,
               tile_size: int = DEFAULT_TILE_SIZE) -> list:
    """Return the candidate (tx, ty) tiles whose exact maximum alpha over the
    tile rectangle is >= 1/255. Never discards a tile with a contributing
    pixel."""
    if len(candidate_tiles) == 0:
        return []
    tiles = np.asarray(candidate_tiles, dtype=np.int64).reshape(-1, 2)
    tiles_x = (intr.width + tile_size - 1) // tile_size
    ids = tiles[:, 1] * tiles_x + tiles[:, 0]
    x0, x1, y0, y1 = _tile_rects(ids, tiles_x, tile_size, intr.width,
                                 intr.height, np.float64)
    mean = np.broadcast_to(pg.mean2d, (len(ids), 2)).astype(np.float64)
    inv = np.broadcast_to(pg.inv_cov2d, (len(ids), 2, 2)).astype(np.float64)
    qmin = _min_mahalanobis_sq(mean, inv, x0, x1, y0, y1)
    if pg.opacity < ALPHA_CUTOFF:
        return []
    qmax = 2.0 * np.log(255.0 * pg.opacity)
    keep = qmin <= qmax
    return [tuple(t) for t in tiles[keep]]


def bin_and_sort(screen: SplatScreen, intr: CameraIntrinsics,
                 tile_size: int = DEFAULT_TILE_SIZE,
                 cull: bool = True) -> TileGrid:
    """Assign projected Gaussians to tiles and depth-sort each tile's list.

    Candidate tiles come from the axis-aligned box of the 1/255-cutoff
    radius; with ``cull`` enabled, tiles whose exact max alpha falls below
    1/255 are dropped.
    """
    tiles_x = (intr.width + tile_size - 1) // tile_size
    tiles_y = (intr.height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    m = len(screen)
    dt = screen.mean2d.dtype if m else np.dtype(np.float32)

    if m == 0:
        return TileGrid(tile_size, tiles_x, tiles_y,
                        np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(n_tiles + 1, np.int64))

    u, v = screen.mean2d[:, 0], screen.mean2d[:, 1]
    r = screen.radius_cut
    tx0 = np.clip(np.floor((u - r) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((u + r) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((v - r) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((v + r) / tile_size), 0, tiles_y - 1).astype(np.int64)
    # Gaussians whose cutoff box misses the image entirely.
    visible = (u + r >= 0) & (u - r <= intr.width - 1) & \
              (v + r >= 0) & (v - r <= intr.height - 1)
    nx = np.where(visible, tx1 - tx0 + 1, 0)
    ny = np.where(visible, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return TileGrid(tile_size, tiles_x, tiles_y,
                        np.zeros(0, np.int64), np.zeros(0, np.int64),
                        np.zeros(n_tiles + 1, np.int64))

    gauss = np.repeat(np.arange(m), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(starts, counts)
    lx = local % np.repeat(np.maximum(nx, 1), counts)
    ly = local // np.repeat(np.maximum(nx, 1), counts)
    ptx = tx0[gauss] + lx
    pty = ty0[gauss] + ly
    tile_ids = pty * tiles_x + ptx

    if cull:
        if HAVE_NUMBA:
            keep = np.empty(gauss.shape[0], dtype=np.bool_)
            _cull_pairs(gauss, tile_ids, tiles_x, tile_size,
                        np.arange(intr.width, dtype=dt),
                        np.arange(intr.height, dtype=dt),
                        screen.mean2d, screen.inv_cov2d, screen.q_cut, keep)
        else:
            x0, x1, y0, y1 = _tile_rects(tile_ids, tiles_x, tile_size,
                                         intr.width, intr.height, dt.type)
            qmin = _min_mahalanobis_sq(screen.mean2d[gauss],
                                       screen.inv_cov2d[gauss], x0, x1, y0, y1)
            keep = qmin <= screen.q_cut[gauss]
        gauss, tile_ids = gauss[keep], tile_ids[keep]

    # Sort pairs by (tile, depth, map index): a single integer key is much
    # faster than lexsort; depth ranks are stable so ties break by row order.
    drank = np.empty(m, dtype=np.int64)
    drank[np.argsort(screen.depth, kind="stable")] = np.arange(m)
    order = np.argsort(tile_ids * np.int64(m) + drank[gauss])
    gauss = gauss[order]
    tile_ids = tile_ids[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_ids, minlength=n_tiles), out=offsets[1:])
    return TileGrid(tile_size, tiles_x, tiles_y, gauss, tile_ids, offsets)


COMPACT_EVERY = 16


@njit(cache=True, parallel=True)
def _composite_tiles(pair_gaussian, offsets, tiles_x, tile_size, width, height,
                     xs, ys, mean2d, inv_cov, color, opacity, depth, q_cut,
                     radius, early_termination, thresh, cutoff, clamp,
                     out_c, out_d, out_t, out_nc):  # pragma: no cover - compiled
    # Per tile, each Gaussian visits only its cutoff box clipped to the tile;
    # front-to-back order per pixel is the pair order, exactly as a per-pixel
    # scan. Tiles write disjoint pixels, so the parallel loop stays bitwise
    # deterministic at any thread count. xs/ys carry the working dtype so the
    # float32 path never promotes. Beyond q_cut (+ a safety margin) alpha is
    # provably below 1/255 and the exp is skipped without consulting the
    # exact alpha test.
    n_tiles = offsets.shape[0] - 1
    one = clamp * 0 + 1
    half = one / 2
    two = one + one
    q_margin = one / 64
    for t in prange(n_tiles):
        lo = offsets[t]
        hi = offsets[t + 1]
        if hi == lo:
            continue
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x_lo = tx * tile_size
        y_lo = ty * tile_size
        x_hi = min(x_lo + tile_size, width)    # exclusive
        y_hi = min(y_lo + tile_size, height)
        Tl = np.full((y_hi - y_lo, x_hi - x_lo), one)
        Cl = np.full((y_hi - y_lo, x_hi - x_lo, 3), one * 0)
        Dl = np.full((y_hi - y_lo, x_hi - x_lo), one * 0)
        Nl = np.zeros((y_hi - y_lo, x_hi - x_lo), dtype=np.int32)
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
            dep = depth[g]
            for py in range(py0, py1 + 1):
                dy = ys[py] - my
                qy = c * dy * dy
                bdy = two * b * dy
                row = py - y_lo
                for px in range(px0, px1 + 1):
                    col = px - x_lo
                    trans = Tl[row, col]
                    if early_termination and trans < thresh:
                        continue
                    dx = xs[px] - mx
                    q = a * dx * dx + bdy * dx + qy
                    if q > qc:
                        continue
                    alpha = opa * np.exp(-(half * q))
                    if alpha > clamp:
                        alpha = clamp
                    if alpha < cutoff:
                        continue
                    w = alpha * trans
                    Cl[row, col, 0] += w * col0
                    Cl[row, col, 1] += w * col1
                    Cl[row, col, 2] += w * col2
                    Dl[row, col] += w * dep
                    Nl[row, col] += 1
                    Tl[row, col] = trans * (one - alpha)
        out_c[y_lo:y_hi, x_lo:x_hi] = Cl
        out_d[y_lo:y_hi, x_lo:x_hi] = Dl
        out_t[y_lo:y_hi, x_lo:x_hi] = Tl
        out_nc[y_lo:y_hi, x_lo:x_hi] = Nl


def render(grid: TileGrid, screen: SplatScreen, intr: CameraIntrinsics,
           early_termination: bool = True,
           term_threshold: float = TERMINATION_THRESHOLD) -> RenderTargets:
    """Front-to-back composite color, depth, and opacity per pixel."""
    if HAVE_NUMBA:
        H, W = intr.height, intr.width
        dt = screen.mean2d.dtype if len(screen) else np.dtype(np.float32)
        out_c = np.zeros((H, W, 3), dtype=dt)
        out_d = np.zeros((H, W), dtype=dt)
        out_t = np.ones((H, W), dtype=dt)
        out_nc = np.zeros((H, W), dtype=np.int32)
        if grid.n_pairs:
            _composite_tiles(
                grid.pair_gaussian, grid.offsets, grid.tiles_x, grid.tile_size,
                W, H, np.arange(W, dtype=dt), np.arange(H, dtype=dt),
                screen.mean2d, screen.inv_cov2d,
                np.ascontiguousarray(screen.color), screen.opacity, screen.depth,
                screen.q_cut, screen.radius_cut,
                early_termination, dt.type(term_threshold),
                dt.type(ALPHA_CUTOFF), dt.type(ALPHA_CLAMP),
                out_c, out_d, out_t, out_nc)
        return RenderTargets(color=out_c, depth=out_d, opacity=1 - out_t,
                             transmittance=out_t, n_contrib=out_nc)
    return _render_numpy(grid, screen, intr, early_termination, term_threshold)


def _render_numpy(grid: TileGrid, screen: SplatScreen, intr: CameraIntrinsics,
                  early_termination: bool = True,
                  term_threshold: float = TERMINATION_THRESHOLD) -> RenderTargets:
    """Vectorized compositing over flat live-pixel slots grouped by tile.

    Slots are compacted away once terminated or their tile's list is
    exhausted, so work tracks the surviving pixels rather than the deepest
    tile. Results match the compiled path within floating-point rounding.
    """
    H, W = intr.height, intr.width
    ts = grid.tile_size
    dt = screen.mean2d.dtype if len(screen) else np.dtype(np.float32)

    out_C = np.zeros((H, W, 3), dtype=dt)
    out_D = np.zeros((H, W), dtype=dt)
    out_T = np.ones((H, W), dtype=dt)
    out_NC = np.zeros((H, W), dtype=np.int32)

    lengths = np.diff(grid.offsets)
    tsel = np.nonzero(lengths > 0)[0]
    if tsel.size:
        n_t = tsel.size
        toff = grid.offsets[tsel]
        tlen = lengths[tsel]
        n_pairs = grid.n_pairs

        # Live pixel slots for every valid pixel of tiles that have pairs,
        # grouped contiguously by tile.
        dr, dc = np.mgrid[0:ts, 0:ts]
        base_x = (tsel % grid.tiles_x) * ts
        base_y = (tsel // grid.tiles_x) * ts
        px = (base_x[:, None] + dc.ravel()[None, :]).ravel()
        py = (base_y[:, None] + dr.ravel()[None, :]).ravel()
        tile_ord = np.repeat(np.arange(n_t), ts * ts)
        tile_len = np.repeat(tlen, ts * ts)
        valid = (px < W) & (py < H)
        px, py, tile_ord, tile_len = px[valid], py[valid], tile_ord[valid], tile_len[valid]
        seg_counts = np.bincount(tile_ord, minlength=n_t)
        apx_lin = py * W + px
        fx = px.astype(dt)
        fy = py.astype(dt)

        n = px.shape[0]
        T = np.ones(n, dtype=dt)
        C = np.zeros((n, 3), dtype=dt)
        D = np.zeros(n, dtype=dt)
        NC = np.zeros(n, dtype=np.int32)

        thresh = dt.type(term_threshold) if early_termination else dt.type(0.0)
        cutoff = dt.type(ALPHA_CUTOFF)
        clamp = dt.type(ALPHA_CLAMP)
        neg_half = dt.type(-0.5)
        one = dt.type(1)

        def dump(idx):
            lin = apx_lin[idx]
            out_C.reshape(-1, 3)[lin] = C[idx]
            out_D.reshape(-1)[lin] = D[idx]
            out_T.reshape(-1)[lin] = T[idx]
            out_NC.reshape(-1)[lin] = NC[idx]

        r = 0
        min_len = int(tile_len.min())
        while T.shape[0]:
            # One Gaussian per tile this rank, expanded to the tile's live
            # pixels; dead tiles have zero live slots so their (clipped,
            # arbitrary) row is never used.
            g = grid.pair_gaussian[np.minimum(toff + r, n_pairs - 1)]
            mu_x = np.repeat(screen.mean2d[g, 0], seg_counts)
            mu_y = np.repeat(screen.mean2d[g, 1], seg_counts)
            ia = np.repeat(screen.inv_cov2d[g, 0, 0], seg_counts)
            ib = np.repeat(screen.inv_cov2d[g, 0, 1], seg_counts)
            ic = np.repeat(screen.inv_cov2d[g, 1, 1], seg_counts)
            opa = np.repeat(screen.opacity[g], seg_counts)
            dx = fx - mu_x
            dy = fy - mu_y
            q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
            alpha = np.minimum(opa * np.exp(neg_half * q), clamp)
            if early_termination:
                contrib = (alpha >= cutoff) & (T >= thresh)
            else:
                contrib = alpha >= cutoff
            ac = np.where(contrib, alpha, dt.type(0))
            w = ac * T
            C += w[:, None] * np.repeat(screen.color[g], seg_counts, axis=0)
            D += w * np.repeat(screen.depth[g], seg_counts)
            NC += contrib
            T *= one - ac
            r += 1

            if r % COMPACT_EVERY == 0 or r >= min_len:
                keep = tile_len > r
                if early_termination:
                    keep &= T >= thresh
                if not keep.all():
                    done = np.nonzero(~keep)[0]
                    dump(done)
                    live = np.nonzero(keep)[0]
                    T, C, D, NC = T[live], C[live], D[live], NC[live]
                    fx, fy = fx[live], fy[live]
                    tile_ord, tile_len, apx_lin = (tile_ord[live], tile_len[live],
                                                   apx_lin[live])
                    seg_counts = np.bincount(tile_ord, minlength=n_t)
                if T.shape[0] == 0:
                    break
                min_len = int(tile_len.min())

    return RenderTargets(
        color=out_C,
        depth=out_D,
        opacity=1 - out_T,
        transmittance=out_T,
        n_contrib=out_NC,
    )


def reference_render(screen: SplatScreen, intr: CameraIntrinsics) -> RenderTargets:
    """Oracle renderer: global depth sort, per-Gaussian streaming composite,
    no tiling, no culling, no early termination.

    Each Gaussian is evaluated over its exact 1/255-cutoff box; outside it
    alpha is below the cutoff and contributes exactly zero by Eq. semantics.
    """
    H, W = intr.height, intr.width
    dt = screen.mean2d.dtype if len(screen) else np.dtype(np.float32)
    C = np.zeros((H, W, 3), dtype=dt)
    D = np.zeros((H, W), dtype=dt)
    T = np.ones((H, W), dtype=dt)
    NC = np.zeros((H, W), dtype=np.int32)

    order = np.lexsort((screen.source_index, screen.depth))
    cutoff = dt.type(ALPHA_CUTOFF)
    clamp = dt.type(ALPHA_CLAMP)
    for i in order:
        u, v = screen.mean2d[i]
        r = screen.radius_cut[i]
        c0 = max(0, int(np.ceil(u - r)))
        c1 = min(W - 1, int(np.floor(u + r)))
        r0 = max(0, int(np.ceil(v - r)))
        r1 = min(H - 1, int(np.floor(v + r)))
        if c0 > c1 or r0 > r1:
            continue
        xs = np.arange(c0, c1 + 1, dtype=dt) - u
        ys = np.arange(r0, r1 + 1, dtype=dt) - v
        a = screen.inv_cov2d[i, 0, 0]
        b = screen.inv_cov2d[i, 0, 1]
        c = screen.inv_cov2d[i, 1, 1]
        q = (a * xs * xs)[None, :] + (c * ys * ys)[:, None] \
            + (2 * b) * ys[:, None] * xs[None, :]
        alpha = np.minimum(screen.opacity[i] * np.exp(dt.type(-0.5) * q), clamp)
        alpha[alpha < cutoff] = 0
        sl = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        w = alpha * T[sl]
        C[sl] += w[..., None] * screen.color[i]
        D[sl] += w * screen.depth[i]
        NC[sl] += alpha > 0
        T[sl] *= 1 - alpha

    return RenderTargets(color=C, depth=D, opacity=1 - T, transmittance=T,
                         n_contrib=NC)
