"""Per-Gaussian geometric math: covariances, perspective projection with the
affine Jacobian, screen-space alpha weights, and spherical-harmonic color."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraIntrinsics, CameraPose

# Real spherical-harmonic normalization constants, degrees 0-3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.3153915652525205,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

DILATION_FLOOR = 0.3        # px^2 added to the cov2d diagonal (anti-aliasing)
ALPHA_CLAMP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
# The affine Jacobian of the projection diverges as points approach the image
# plane; its view-plane coordinates are clamped to this multiple of the
# half-FOV tangent (the EWA splatting guard band) before building it.
FRUSTUM_GUARD = 1.3


def rgb_to_sh0(rgb):
    """Degree-0 coefficient whose evaluated base color equals ``rgb``."""
    return (np.asarray(rgb) - 0.5) / SH_C0


def sh0_to_rgb(coeff):
    return np.asarray(coeff) * SH_C0 + 0.5


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 real SH basis functions for unit directions (..., 3)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    b = np.empty(d.shape[:-1] + (16,), dtype=d.dtype)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * xy
    b[..., 5] = SH_C2[1] * yz
    b[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * xz
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    b[..., 10] = SH_C3[1] * xy * z
    b[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    b[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Gradients of the 16 basis functions w.r.t. the direction, (..., 16, 3)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    g = np.zeros(d.shape[:-1] + (16, 3), dtype=d.dtype)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
    g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
    g[..., 6, 2] = SH_C2[2] * (4.0 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2.0 * x)
    g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
    g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
    g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
    g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
    g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = SH_C3[5] * (xx - yy)
    g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def evaluate_sh(sh_coeffs, view_dir) -> np.ndarray:
    """Color from SH coefficients for a unit view direction: 0.5 + basis.coeffs,
    clamped to >= 0."""
    coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(16, 3)
    d = np.asarray(view_dir, dtype=np.float64).reshape(3)
    b = sh_basis(d)
    return np.maximum(b @ coeffs + 0.5, 0.0)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from quaternions (..., 4) ordered (w, x, y, z).

    Quaternions are renormalized, so the map is invariant under q -> -q and
    under scaling.
    """
    q = np.asarray(q)
    n = np.sqrt((q * q).sum(axis=-1, keepdims=True))
    q = q / n
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_backward(q_unit: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain a rotation-matrix gradient back to the (unit) quaternion,
    projected onto the tangent space of the unit sphere.

    ``q_unit`` must already be normalized; the tangent projection makes the
    result the exact gradient of q -> R(q/|q|) at |q| = 1.
    """
    w, x, y, z = q_unit[..., 0], q_unit[..., 1], q_unit[..., 2], q_unit[..., 3]
    d = dR
    dw = 2 * (-z * d[..., 0, 1] + y * d[..., 0, 2]
              + z * d[..., 1, 0] - x * d[..., 1, 2]
              - y * d[..., 2, 0] + x * d[..., 2, 1])
    dx = 2 * (y * d[..., 0, 1] + z * d[..., 0, 2]
              + y * d[..., 1, 0] - 2 * x * d[..., 1, 1] - w * d[..., 1, 2]
              + z * d[..., 2, 0] + w * d[..., 2, 1] - 2 * x * d[..., 2, 2])
    dy = 2 * (-2 * y * d[..., 0, 0] + x * d[..., 0, 1] + w * d[..., 0, 2]
              + x * d[..., 1, 0] + z * d[..., 1, 2]
              - w * d[..., 2, 0] + z * d[..., 2, 1] - 2 * y * d[..., 2, 2])
    dz = 2 * (-2 * z * d[..., 0, 0] - w * d[..., 0, 1] + x * d[..., 0, 2]
              + w * d[..., 1, 0] - 2 * z * d[..., 1, 1] + y * d[..., 1, 2]
              + x * d[..., 2, 0] + y * d[..., 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=-1)
    radial = (dq * q_unit).sum(axis=-1, keepdims=True)
    return dq - radial * q_unit


def covariance_3d(log_scale, rotation) -> np.ndarray:
    """World-space covariance R diag(exp(2*log_scale)) R^T (symmetric PD)."""
    ls = np.asarray(log_scale, dtype=np.float64).reshape(3)
    R = quat_to_rot(np.asarray(rotation, dtype=np.float64).reshape(4))
    M = R * np.exp(ls)[None, :]
    return M @ M.T


def projection_jacobian(t_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of the pinhole projection at camera-space points (..., 3),
    returned as (..., 2, 3)."""
    t = np.asarray(t_cam)
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    J = np.zeros(t.shape[:-1] + (2, 3), dtype=t.dtype)
    J[..., 0, 0] = fx / z
    J[..., 0, 2] = -fx * x / (z * z)
    J[..., 1, 1] = fy / z
    J[..., 1, 2] = -fy * y / (z * z)
    return J


def project_mean(pose: CameraPose, intr: CameraIntrinsics, position_w,
                 near: float = 0.01):
    """Project a world point: returns ((u, v), depth). Depth <= near is the
    caller's signal to reject."""
    p = np.asarray(position_w, dtype=np.float64).reshape(3)
    t = pose.rotation_wc @ p + pose.translation_wc
    z = t[2]
    uv = np.array([intr.fx * t[0] / z + intr.cx, intr.fy * t[1] / z + intr.cy])
    return uv, float(z)


def clamp_for_jacobian(t_cam: np.ndarray, intr: CameraIntrinsics,
                       guard: float = FRUSTUM_GUARD):
    """Clamp camera-space view-plane coordinates to the guard-banded frustum
    cone before evaluating the projection Jacobian. Returns the clamped
    points and the per-axis clamp masks."""
    t = np.asarray(t_cam)
    z = t[..., 2]
    lim_x = guard * (0.5 * intr.width) / intr.fx
    lim_y = guard * (0.5 * intr.height) / intr.fy
    tx = t[..., 0] / z
    ty = t[..., 1] / z
    cx = np.clip(tx, -lim_x, lim_x)
    cy = np.clip(ty, -lim_y, lim_y)
    out = np.stack([cx * z, cy * z, z], axis=-1)
    return out, tx != cx, ty != cy


def project_covariance(pose: CameraPose, intr: CameraIntrinsics, position_w,
                       cov3d, dilation: float = DILATION_FLOOR) -> np.ndarray:
    """Screen-space covariance [J W cov3d W^T J^T] + dilation*I, with the
    Jacobian evaluated at the guard-band-clamped camera-space mean."""
    p = np.asarray(position_w, dtype=np.float64).reshape(3)
    W = pose.rotation_wc
    t = W @ p + pose.translation_wc
    tc, _, _ = clamp_for_jacobian(t, intr)
    J = projection_jacobian(tc, intr.fx, intr.fy)
    T = J @ W
    cov2d = T @ np.asarray(cov3d, dtype=np.float64) @ T.T
    return cov2d + dilation * np.eye(2)


@dataclass
class ProjectedGaussian:
    """A single screen-space Gaussian (scalar form used by tests and the
    alpha-weight contract; batched rendering uses SplatScreen)."""

    mean2d: np.ndarray          # (2,) pixels
    cov2d: np.ndarray           # (2, 2), dilation included
    inv_cov2d: np.ndarray       # (2, 2)
    depth: float
    color: np.ndarray           # (3,)
    opacity: float
    source_index: int = 0


def alpha_weight(pg: ProjectedGaussian, pixel) -> float:
    """Contribution weight o * exp(-0.5 d^T inv_cov d), clamped to 0.99;
    values below 1/255 count as zero."""
    d = pg.mean2d - np.asarray(pixel, dtype=np.float64)
    q = float(d @ pg.inv_cov2d @ d)
    a = min(pg.opacity * np.exp(-0.5 * q), ALPHA_CLAMP)
    return a if a >= ALPHA_CUTOFF else 0.0


class SplatScreen:
    """Per-view projected Gaussians, structure-of-arrays.

    Only Gaussians that pass the near-plane and degeneracy checks are kept;
    ``source_index`` maps rows back to the GaussianMap.
    """

    def __init__(self, mean2d, cov2d, inv_cov2d, depth, color, opacity,
                 source_index, t_cam, t_clamped, clamped_x, clamped_y,
                 view_dir, basis, color_raw, radius_cut, q_cut):
        self.mean2d = mean2d            # (M, 2)
        self.cov2d = cov2d              # (M, 2, 2) dilated
        self.inv_cov2d = inv_cov2d      # (M, 2, 2)
        self.depth = depth              # (M,)
        self.color = color              # (M, 3) SH-evaluated, clamped >= 0
        self.opacity = opacity          # (M,)
        self.source_index = source_index  # (M,) int
        self.t_cam = t_cam              # (M, 3) camera-space means
        self.t_clamped = t_clamped      # (M, 3) guard-clamped means (Jacobian)
        self.clamped_x = clamped_x      # (M,) bool, x hit the guard band
        self.clamped_y = clamped_y      # (M,) bool
        self.view_dir = view_dir        # (M, 3) unit world dirs, cam -> mean
        self.basis = basis              # (M, 16) SH basis at view_dir
        self.color_raw = color_raw      # (M, 3) pre-clamp colors
        self.radius_cut = radius_cut    # (M,) pixel radius of the 1/255 cutoff
        self.q_cut = q_cut              # (M,) Mahalanobis^2 at the cutoff

    def __len__(self) -> int:
        return self.mean2d.shape[0]

    def get(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            mean2d=self.mean2d[i].astype(np.float64),
            cov2d=self.cov2d[i].astype(np.float64),
            inv_cov2d=self.inv_cov2d[i].astype(np.float64),
            depth=float(self.depth[i]),
            color=self.color[i].astype(np.float64),
            opacity=float(self.opacity[i]),
            source_index=int(self.source_index[i]),
        )


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def project_gaussians(positions, log_scales, rotations, opacity_logits,
                      sh_coeffs, pose: CameraPose, intr: CameraIntrinsics,
                      near: float = 0.01, dilation: float = DILATION_FLOOR,
                      select=None) -> SplatScreen:
    """Project map arrays into a SplatScreen for one view.

    ``select`` optionally restricts projection to a boolean mask or index
    array over the input rows (used for sky-on/off renders).
    """
    dt = positions.dtype
    n_total = positions.shape[0]
    if select is None:
        idx = np.arange(n_total)
    else:
        select = np.asarray(select)
        idx = np.nonzero(select)[0] if select.dtype == bool else select

    pos = positions[idx]
    W = pose.rotation_wc.astype(dt)
    p_wc = pose.translation_wc.astype(dt)
    t_cam = pos @ W.T + p_wc
    z = t_cam[:, 2]
    keep = z > dt.type(near)

    opacity = sigmoid(opacity_logits[idx])
    keep &= opacity >= dt.type(ALPHA_CUTOFF)

    idx, pos, t_cam, z, opacity = idx[keep], pos[keep], t_cam[keep], z[keep], opacity[keep]
    m = idx.shape[0]
    fx, fy = dt.type(intr.fx), dt.type(intr.fy)
    cx, cy = dt.type(intr.cx), dt.type(intr.cy)

    mean2d = np.stack([fx * t_cam[:, 0] / z + cx, fy * t_cam[:, 1] / z + cy], axis=1)

    R = quat_to_rot(rotations[idx])
    s = np.exp(log_scales[idx])
    M3 = R * s[:, None, :]
    cov3d = M3 @ np.swapaxes(M3, 1, 2)

    t_clamped, clamped_x, clamped_y = clamp_for_jacobian(t_cam, intr)
    J = projection_jacobian(t_clamped, intr.fx, intr.fy)
    T = J @ W[None]
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += dt.type(dilation)
    cov2d[:, 1, 1] += dt.type(dilation)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    good = np.isfinite(det) & (det > 0)
    if not good.all():
        idx, t_cam, z, opacity = idx[good], t_cam[good], z[good], opacity[good]
        mean2d, cov2d, det, pos = mean2d[good], cov2d[good], det[good], pos[good]
        t_clamped = t_clamped[good]
        clamped_x, clamped_y = clamped_x[good], clamped_y[good]
        m = idx.shape[0]

    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = -cov2d[:, 0, 1] / det
    inv[:, 1, 0] = inv[:, 0, 1]

    cam_center = pose.camera_center().astype(dt)
    v = pos - cam_center
    vnorm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    view_dir = v / vnorm
    basis = sh_basis(view_dir)
    color_raw = np.einsum("mk,mkc->mc", basis, sh_coeffs[idx]) + dt.type(0.5)
    color = np.maximum(color_raw, 0)

    # Mahalanobis^2 and pixel radius at which alpha falls to 1/255; the 0.99
    # clamp never shrinks the support, so the bound uses raw opacity.
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0))
    q_cut = 2.0 * np.log(opacity * dt.type(255.0))
    # Slightly inflated so float rounding can never shrink the support box
    # below the exact q <= q_cut region.
    radius_cut = (np.sqrt(np.maximum(q_cut, 0) * lam_max)
                  * dt.type(1 + 1e-5) + dt.type(1e-3)).astype(dt)

    return SplatScreen(
        mean2d=mean2d, cov2d=cov2d, inv_cov2d=inv, depth=z,
        color=color, opacity=opacity, source_index=idx.astype(np.int64),
        t_cam=t_cam, t_clamped=t_clamped, clamped_x=clamped_x,
        clamped_y=clamped_y, view_dir=view_dir, basis=basis,
        color_raw=color_raw, radius_cut=radius_cut, q_cut=q_cut.astype(dt),
    )
