"""Pose from 2D-3D correspondences: minimal P3P solver inside a RANSAC
loop, followed by Levenberg-Marquardt refinement on the inlier set.

The minimal solver is the classical three-point resection: with
``u = s2/s1`` and ``v = s3/s1`` the law-of-cosines system reduces to a
quartic in ``v`` whose coefficients are formed from the squared side
ratios and the pairwise bearing cosines.  Each admissible root yields
camera-frame depths and an aligned pose via the orthogonal Procrustes
solution.  All hypothesis generation and scoring is vectorized and fully
deterministic for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration
from .geometry import CameraIntrinsics, Pose, axis_angle_to_matrix, seeded_rng

_SCORE_CHUNK = 256


@dataclass(frozen=True)
class RansacConfig:
    """Consensus-loop settings.

    Attributes:
        threshold_px: reprojection error below which a correspondence
            counts as an inlier.
        iterations: number of minimal samples drawn.
        min_inliers: consensus size below which the solve is rejected.
    """

    threshold_px: float = 2.0
    iterations: int = 512
    min_inliers: int = 6

    def __post_init__(self) -> None:
        if self.threshold_px <= 0:
            raise ValueError("threshold_px must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3")


def _p3p_candidates(bearings: np.ndarray, points: np.ndarray):
    """Solve the three-point resection for a batch of minimal samples.

    :param bearings: (m, 3, 3) unit bearing vectors per sample.
    :param points: (m, 3, 3) matching model-frame points.
    :return: (rotations (k, 3, 3), translations (k, 3), sample index (k,))
        for every admissible solution, in deterministic order.
    """
    u1, u2, u3 = bearings[:, 0], bearings[:, 1], bearings[:, 2]
    x1, x2, x3 = points[:, 0], points[:, 1], points[:, 2]

    a2 = np.sum((x2 - x3) ** 2, axis=1)
    b2 = np.sum((x1 - x3) ** 2, axis=1)
    c2 = np.sum((x1 - x2) ** 2, axis=1)
    ca = np.sum(u2 * u3, axis=1)
    cb = np.sum(u1 * u3, axis=1)
    cg = np.sum(u1 * u2, axis=1)

    ok = (a2 > 1e-18) & (b2 > 1e-18) & (c2 > 1e-18)
    # Reject near-collinear model triples where the quartic degenerates.
    cross = np.cross(x2 - x1, x3 - x1)
    ok &= np.sum(cross * cross, axis=1) > 1e-20

    A = np.where(ok, a2 / np.where(b2 > 0, b2, 1.0), 0.0)
    B = np.where(ok, c2 / np.where(b2 > 0, b2, 1.0), 0.0)

    c4 = (A - B - 1.0) ** 2 - 4.0 * B * ca**2
    c3 = -4.0 * (A**2 * cb - 2 * A * B * cb - A * ca * cg - A * cb
                 + B**2 * cb - 2 * B * ca**2 * cb - B * ca * cg + B * cb
                 + ca * cg)
    c2_ = 2.0 * (2 * A**2 * cb**2 + A**2 - 4 * A * B * cb**2 - 2 * A * B
                 - 4 * A * ca * cb * cg - 2 * A * cg**2 + 2 * B**2 * cb**2
                 + B**2 - 2 * B * ca**2 - 4 * B * ca * cb * cg
                 + 2 * ca**2 + 2 * cg**2 - 1.0)
    c1 = -4.0 * (A**2 * cb - 2 * A * B * cb - A * ca * cg
                 - 2 * A * cb * cg**2 + A * cb + B**2 * cb - B * ca * cg
                 - B * cb + ca * cg)
    c0 = (A - B + 1.0) ** 2 - 4.0 * A * cg**2

    coeffs = np.stack([c4, c3, c2_, c1, c0], axis=1)
    scale = np.max(np.abs(coeffs), axis=1)
    ok &= scale > 0
    ok &= np.abs(c4) > 1e-12 * np.where(scale > 0, scale, 1.0)
    if not np.any(ok):
        return (np.zeros((0, 3, 3)), np.zeros((0, 3)),
                np.zeros(0, dtype=np.int64))

    idx = np.nonzero(ok)[0]
    cn = coeffs[idx] / coeffs[idx, :1]
    # Batched companion-matrix eigenvalues give all quartic roots at once.
    m = len(idx)
    comp = np.zeros((m, 4, 4))
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    comp[:, 0, :] = -cn[:, 1:]
    roots = np.linalg.eigvals(comp)  # (m, 4) complex

    real_ok = np.abs(roots.imag) < 1e-6 * (1.0 + np.abs(roots.real))
    v = roots.real
    v_ok = real_ok & (v > 1e-9)

    samp = np.repeat(idx, 4)
    v = v.reshape(-1)
    keep = v_ok.reshape(-1)
    samp, v = samp[keep], v[keep]
    if len(samp) == 0:
        return (np.zeros((0, 3, 3)), np.zeros((0, 3)),
                np.zeros(0, dtype=np.int64))

    Af, Bf = A[samp], B[samp]
    caf, cbf, cgf = ca[samp], cb[samp], cg[samp]
    den = 2.0 * (cgf - v * caf)
    num = (Af - Bf) * (1.0 + v * v - 2.0 * v * cbf) + 1.0 - v * v
    safe = np.abs(den) > 1e-9
    u = np.where(safe, num / np.where(safe, den, 1.0), 0.0)
    if np.any(~safe):
        # Fall back to the quadratic in u from the third side equation.
        for j in np.nonzero(~safe)[0]:
            disc = cgf[j] ** 2 - (1.0 - Bf[j] * (1.0 + v[j] ** 2
                                                 - 2.0 * v[j] * cbf[j]))
            if disc < 0:
                u[j] = -1.0
                continue
            u[j] = cgf[j] + np.sqrt(disc)

    s1sq = b2[samp] / (1.0 + v * v - 2.0 * v * cbf)
    good = (u > 1e-9) & (s1sq > 0) & np.isfinite(u) & np.isfinite(s1sq)
    samp, u, v, s1sq = samp[good], u[good], v[good], s1sq[good]
    if len(samp) == 0:
        return (np.zeros((0, 3, 3)), np.zeros((0, 3)),
                np.zeros(0, dtype=np.int64))
    s1 = np.sqrt(s1sq)

    cam_pts = np.stack([s1[:, None] * bearings[samp, 0],
                        (u * s1)[:, None] * bearings[samp, 1],
                        (v * s1)[:, None] * bearings[samp, 2]], axis=1)
    model_pts = points[samp]
    rot, tr = _procrustes_align(model_pts, cam_pts)
    return rot, tr, samp


def _procrustes_align(x: np.ndarray, y: np.ndarray):
    """Batched rigid alignment: find R, t with ``R x + t ~= y``.

    :param x: (m, n, 3) source point sets.
    :param y: (m, n, 3) target point sets.
    """
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    h = np.einsum("mki,mkj->mij", xc, yc)
    uu, _, vh = np.linalg.svd(h)
    det = np.linalg.det(np.einsum("mji,mkj->mik", vh, uu))
    d = np.ones((len(x), 3))
    d[:, 2] = det
    rot = np.einsum("mji,mj,mkj->mik", vh, d, uu)
    tr = y.mean(axis=1) - np.einsum("mij,mj->mi", rot, x.mean(axis=1))
    return rot, tr


def _reprojection_errors(rot, tr, points, pixels, cam):
    """Errors for a batch of poses against all correspondences: (m, n)."""
    pc = np.einsum("mij,nj->mni", rot, points) + tr[:, None, :]
    z = pc[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    u = cam.fx * pc[..., 0] / zs + cam.cx
    v = cam.fy * pc[..., 1] / zs + cam.cy
    err = np.hypot(u - pixels[:, 0], v - pixels[:, 1])
    return np.where(front, err, np.inf)


def _lm_refine(rot, tr, points, pixels, cam, max_iters: int = 40):
    """Minimize squared reprojection error over the 6-dim pose tangent."""
    rot = rot.copy()
    tr = tr.copy()

    def residuals(r, t):
        pc = points @ r.T + t
        z = pc[:, 2]
        if np.any(z <= 1e-9):
            return None, None
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
        res = np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1)
        return res, pc

    res, pc = residuals(rot, tr)
    if res is None:
        return rot, tr
    cost = float(np.sum(res * res))
    lam = 1e-3
    for _ in range(max_iters):
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        inv_z = 1.0 / z
        # d(u,v)/d(camera point)
        du = np.stack([cam.fx * inv_z, np.zeros_like(z),
                       -cam.fx * x * inv_z * inv_z], axis=1)
        dv = np.stack([np.zeros_like(z), cam.fy * inv_z,
                       -cam.fy * y * inv_z * inv_z], axis=1)
        # Left perturbation: d(exp(w) R p + t)/dw = -[R p]_x = -[pc - t]_x
        q = pc - tr
        zeros = np.zeros_like(z)
        neg_skew = np.stack([
            np.stack([zeros, q[:, 2], -q[:, 1]], axis=1),
            np.stack([-q[:, 2], zeros, q[:, 0]], axis=1),
            np.stack([q[:, 1], -q[:, 0], zeros], axis=1)], axis=1)
        jw_u = np.einsum("ni,nij->nj", du, neg_skew)
        jw_v = np.einsum("ni,nij->nj", dv, neg_skew)
        j = np.concatenate([
            np.concatenate([jw_u, du], axis=1),
            np.concatenate([jw_v, dv], axis=1)], axis=0)
        r_all = np.concatenate([res[:, 0], res[:, 1]])
        jtj = j.T @ j
        jtr = j.T @ r_all
        improved = False
        for _ in range(8):
            aug = jtj + lam * np.diag(np.diag(jtj))
            try:
                delta = np.linalg.solve(aug, -jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_rot = axis_angle_to_matrix(delta[:3]) @ rot
            new_tr = tr + delta[3:]
            new_res, new_pc = residuals(new_rot, new_tr)
            if new_res is None:
                lam *= 10.0
                continue
            new_cost = float(np.sum(new_res * new_res))
            if new_cost < cost:
                rot, tr, res, pc = new_rot, new_tr, new_res, new_pc
                drop = cost - new_cost
                cost = new_cost
                lam = max(lam * 0.3, 1e-12)
                improved = True
                if drop < 1e-16 * (cost + 1e-300) or np.linalg.norm(delta) < 1e-13:
                    return rot, tr
                break
            lam *= 10.0
        if not improved:
            break
    return rot, tr


def solve_pnp_ransac(pixels, points, cam: CameraIntrinsics,
                     config: RansacConfig = RansacConfig(),
                     seed: int = 0):
    """Robust pose from 2D-3D correspondences.

    :param pixels: (n, 2) image positions, pixel-center convention.
    :param points: (n, 3) matching model-frame points.
    :param cam: pinhole intrinsics.
    :param config: consensus settings.
    :param seed: drives minimal-sample selection; same seed, same result.
    :return: (pose, inlier_mask) where inlier_mask is a boolean (n,) array.
    :raises DegenerateConfiguration: fewer than ``min_inliers``
        correspondences supplied, or no hypothesis reached consensus.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pixels)
    if len(points) != n:
        raise ValueError("pixels and points must pair up")
    if n < 6 or n < config.min_inliers:
        raise DegenerateConfiguration(
            f"need at least {max(6, config.min_inliers)} correspondences, "
            f"got {n}")

    bearings = np.concatenate(
        [(pixels[:, :1] - cam.cx) / cam.fx,
         (pixels[:, 1:] - cam.cy) / cam.fy,
         np.ones((n, 1))], axis=1)
    bearings /= np.linalg.norm(bearings, axis=1, keepdims=True)

    rng = seeded_rng(seed, 0x9A5C)
    samples = np.empty((config.iterations, 3), dtype=np.int64)
    for i in range(config.iterations):
        samples[i] = rng.choice(n, size=3, replace=False)

    rot, tr, _ = _p3p_candidates(bearings[samples], points[samples])
    if len(rot) == 0:
        raise DegenerateConfiguration("no admissible minimal solution")

    # Ties on consensus size break toward the lowest candidate index.
    best_count = -1
    best_idx = -1
    for lo in range(0, len(rot), _SCORE_CHUNK):
        err = _reprojection_errors(rot[lo:lo + _SCORE_CHUNK],
                                   tr[lo:lo + _SCORE_CHUNK],
                                   points, pixels, cam)
        counts = (err < config.threshold_px).sum(axis=1)
        j = int(np.argmax(counts))
        if int(counts[j]) > best_count:
            best_count, best_idx = int(counts[j]), lo + j

    if best_count < config.min_inliers:
        raise DegenerateConfiguration(
            f"best consensus {best_count} below min_inliers "
            f"{config.min_inliers}")

    cur_rot, cur_tr = rot[best_idx], tr[best_idx]
    # Two refine/reclassify rounds; the second pass settles borderline inliers.
    for _ in range(2):
        err = _reprojection_errors(cur_rot[None], cur_tr[None],
                                   points, pixels, cam)[0]
        inliers = err < config.threshold_px
        if inliers.sum() < 3:
            break
        cur_rot, cur_tr = _lm_refine(cur_rot, cur_tr,
                                     points[inliers], pixels[inliers], cam)

    err = _reprojection_errors(cur_rot[None], cur_tr[None],
                               points, pixels, cam)[0]
    inliers = err < config.threshold_px
    if int(inliers.sum()) < config.min_inliers:
        raise DegenerateConfiguration(
            "refined pose lost consensus below min_inliers")
    return Pose(cur_rot, cur_tr), inliers
