"""Iterative render-and-compare pose refinement.

The query's positional geometry is estimated once and held fixed; each
iteration re-renders the object at the current pose estimate and derives
a relative pose update, either by solving PnP against the decoded
geometry (geometric estimator) or through the learned regressor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoding import (EncodedGeometryMap, EncodingConfig, positional_decode,
                       positional_encode)
from .errors import InsufficientCorrespondences, NaNGuard
from .geometry import CameraIntrinsics, Pose, axis_angle_to_matrix
from .losses import pose_loss
from .meshes import TriangleMesh
from .network import (GeometryNet, _masked_block_mean, convex_upsample,
                      geometry_net_forward, pose_regressor_forward)
from .pnp import RansacConfig, solve_pnp_ransac
from .render import GeometryMap, ImageBuffer, render

_ESTIMATORS = ("geometric", "learned")
_SOURCES = ("network", "oracle")

# gating radius for the geometric estimator, as a fraction of diameter
_GATE_FRACTION = 0.35

# Post-gate correspondences are near-clean, so intermediate iterations
# get away with a slim solver; the last iteration runs at full budget
# so the returned pose never trades accuracy for loop speed.
_PNP_BUDGETS = {
    "fast": (1500, RansacConfig(iterations=128)),
    "full": (4000, RansacConfig()),
}


@dataclass(frozen=True)
class RefinementConfig:
    """Iteration count, loss weighting and estimator selection."""

    iterations: int = 5
    gamma: float = 0.8
    estimator: str = "geometric"
    geometry_source: str = "network"
    attention: str = "cg"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if self.estimator not in _ESTIMATORS:
            raise ValueError(f"estimator must be one of {_ESTIMATORS}")
        if self.geometry_source not in _SOURCES:
            raise ValueError(f"geometry_source must be one of {_SOURCES}")


def _encoding_for(mesh: TriangleMesh, n_freq: int) -> EncodingConfig:
    return EncodingConfig(n_freq=n_freq, half_extent=mesh.diameter / 2.0)


def estimate_query_geometry(net: GeometryNet, query: ImageBuffer,
                            query_mask: np.ndarray, p0: Pose,
                            mesh: TriangleMesh, cam: CameraIntrinsics,
                            cfg: RefinementConfig,
                            gt_geom: GeometryMap | None = None
                            ) -> EncodedGeometryMap:
    """Predict the query's encoded geometry from a reference render at p0.

    With geometry_source "oracle" the network is bypassed and the
    ground-truth geometry is encoded instead, which isolates pose-update
    behavior from network quality.
    """
    enc_cfg = _encoding_for(mesh, net.n_freq)
    if cfg.geometry_source == "oracle":
        if gt_geom is None:
            raise ValueError("oracle geometry requested without gt_geom")
        return positional_encode(gt_geom, enc_cfg)
    ref_img, ref_geom = render(mesh, p0, cam, shading="textured")
    ref_enc = positional_encode(ref_geom, enc_cfg)
    out = geometry_net_forward(net, query, ref_img, ref_enc,
                               attention=cfg.attention)
    full = convex_upsample(out.geo, out.up_mask)
    return EncodedGeometryMap(full, query_mask)


def _apply_update(pose: Pose, delta: np.ndarray,
                  cam: CameraIntrinsics) -> Pose:
    """Compose a 6-dim update onto a pose.

    delta = (du, dv, dz, axis-angle xyz): the rotation acts about the
    object center so it leaves the translation alone; the in-plane
    offsets are scaled by depth over focal length and the depth itself
    moves multiplicatively, which keeps the update well-conditioned
    across distances.
    """
    du, dv, dz = delta[:3]
    dr = axis_angle_to_matrix(delta[3:])
    z = pose.translation[2]
    t = pose.translation + np.array([du * z / cam.fx, dv * z / cam.fy,
                                     z * (np.exp(dz) - 1.0)])
    return Pose(dr @ pose.rotation, t)


def relative_pose_step(gq: EncodedGeometryMap, current: Pose,
                       mesh: TriangleMesh, cam: CameraIntrinsics,
                       cfg: RefinementConfig,
                       net: GeometryNet | None = None,
                       budget: str = "full") -> Pose:
    """One pose update from the fixed query geometry.

    The geometric estimator decodes the geometry into 2D-3D
    correspondences and re-solves the pose outright; the learned one
    compares pooled query geometry against a render at the current pose
    and regresses a small correction.  A zero regressor output returns
    the current pose unchanged.
    """
    if cfg.estimator == "geometric":
        enc_cfg = EncodingConfig(n_freq=gq.channels // 6,
                                 half_extent=mesh.diameter / 2.0)
        geom = positional_decode(gq, enc_cfg)
        # Render-and-compare gate: a pixel covered by the render at the
        # current estimate should decode to roughly the surface point
        # that render sees there.  Pixels far off are vote outliers and
        # would otherwise drag PnP; pixels the render misses keep the
        # benefit of the doubt.
        _, ref_geom = render(mesh, current, cam)
        covered = ref_geom.mask & geom.mask
        dist = np.linalg.norm(
            geom.coords.astype(np.float64) -
            ref_geom.coords.astype(np.float64), axis=2)
        keep = geom.mask & ~(covered & (dist > _GATE_FRACTION *
                                        mesh.diameter))
        if keep.sum() < 6:
            raise InsufficientCorrespondences(
                f"only {int(keep.sum())} decoded pixels after gating")
        geom = GeometryMap(geom.coords, geom.depth, keep)
        ii, jj = np.nonzero(geom.mask)
        pixels = np.stack([jj + 0.5, ii + 0.5], axis=1)
        points = geom.coords[geom.mask]
        cap, pnp_cfg = _PNP_BUDGETS[budget]
        if len(pixels) > cap:  # evenly thinned, keeps PnP cost bounded
            keep = np.linspace(0, len(pixels) - 1, cap).astype(np.int64)
            pixels, points = pixels[keep], points[keep]
        pose, _ = solve_pnp_ransac(pixels, points, cam,
                                   config=pnp_cfg, seed=cfg.seed)
        return pose
    if net is None:
        raise ValueError("learned estimator needs a network")
    _, ref_geom = render(mesh, current, cam, shading="textured")
    enc_cfg = _encoding_for(mesh, net.n_freq)
    ref_enc = positional_encode(ref_geom, enc_cfg)
    gq_pool = _masked_block_mean(gq.values, gq.mask, 8)
    gr_pool = _masked_block_mean(ref_enc.values, ref_enc.mask, 8)
    delta = pose_regressor_forward(net, gq_pool, gr_pool)
    if not np.all(np.isfinite(delta)):
        raise NaNGuard("regressor produced non-finite update")
    return _apply_update(current, delta, cam)


def refine_pose(query: ImageBuffer, query_mask: np.ndarray, p0: Pose,
                mesh: TriangleMesh, cam: CameraIntrinsics,
                net: GeometryNet, cfg: RefinementConfig,
                geometry: EncodedGeometryMap | None = None,
                gt_geom: GeometryMap | None = None,
                gt_pose: Pose | None = None):
    """Refine an initial pose for a fixed number of iterations.

    The query geometry is estimated once (or taken from ``geometry``
    when the caller already has a better source, e.g. the coarse
    stage's voted map) and never recomputed inside the loop.

    Returns:
        (pose, trace) where trace is a JSON-ready dict with one entry
        per iteration carrying the pose and, when gt_pose is given, the
        lattice pose loss against it.
    """
    if geometry is None:
        geometry = estimate_query_geometry(net, query, query_mask, p0,
                                           mesh, cam, cfg, gt_geom=gt_geom)
    pose = p0
    steps = []
    for it in range(cfg.iterations):
        budget = "full" if it == cfg.iterations - 1 else "fast"
        pose = relative_pose_step(geometry, pose, mesh, cam, cfg,
                                  net=net, budget=budget)
        entry = {"pose": pose.matrix().tolist()}
        entry["pose_loss"] = (float(pose_loss(pose, gt_pose, mesh).value)
                              if gt_pose is not None else None)
        steps.append(entry)
    return pose, {"iterations": steps}
