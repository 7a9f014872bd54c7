"""Template-based coarse pose estimation.

A viewsphere of textured renders is matched against the query with the
dense flow matcher; the best-scoring templates each contribute a warped
geometry candidate per query pixel, a per-pixel vote picks the winner,
and PnP on the voted map produces the initial pose for refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, InsufficientCorrespondences, KTooLarge
from .flow import (FlowConfig, FlowField, build_feature_pyramid,
                   estimate_flow, forward_backward_consistency, grayscale,
                   match_pyramids, warp)
from .geometry import (CameraIntrinsics, Pose, sample_template_poses)
from .meshes import TriangleMesh
from .pnp import solve_pnp_ransac
from .render import (GeometryMap, ImageBuffer, bilinear_sample,
                     nearest_sample, render)

_FB_CAP_PX = 32.0              # cycle errors clip here before weighting
_FB_WEIGHT = 0.1
_WORST_SCORE = -1.0 - _FB_WEIGHT * _FB_CAP_PX
_ROLL_BINS = 72                # 5 degree angular resolution before refinement
_QUERY_ROLL_STEP = 2.0 * np.pi / 24.0     # query-side roll quantization
_SCREEN_KEEP = 0.6             # fraction surviving the signature screen
_ROLL_RETRY = 16               # best-screened templates also try peak two


@dataclass(frozen=True)
class CoarseConfig:
    """Template-set size, selection depth and voting behavior."""

    n_templates: int = 128
    k: int = 4
    fill: float = 0.8
    vote: str = "medoid"
    fb_gate_px: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_templates < 1:
            raise ValueError("need at least one template")
        if self.k < 1:
            raise ValueError("k must be positive")
        if not (0.0 < self.fill <= 1.0):
            raise ValueError("fill must be in (0, 1]")
        if self.vote not in ("medoid", "mean"):
            raise ValueError("vote must be 'medoid' or 'mean'")
        if self.fb_gate_px <= 0:
            raise ValueError("fb gate must be positive")


@dataclass
class Template:
    """One viewsphere entry: render, geometry, pose and its set index.

    The feature pyramid and the polar signature are precomputed so that
    scoring a query against the whole set never rebuilds template-side
    descriptors.
    """

    image: ImageBuffer
    geometry: GeometryMap
    pose: Pose
    index: int
    pyramid: object = None
    signature: object = None

    def __post_init__(self) -> None:
        if self.pyramid is None:
            self.pyramid = build_feature_pyramid(self.image)
        if self.signature is None:
            self.signature = _polar_signature(grayscale(self.image),
                                              self.geometry.mask)


@dataclass(frozen=True)
class ScoredTemplate:
    """A template, its alignment score, and the in-plane roll (radians)
    the scorer applied to the template view before matching."""

    template: Template
    score: float
    roll: float = 0.0


def template_radius(mesh: TriangleMesh, cam: CameraIntrinsics,
                    fill: float) -> float:
    """Camera distance at which the object spans ``fill`` of the frame."""
    f = min(cam.fx, cam.fy)
    side = min(cam.width, cam.height)
    return f * mesh.diameter / (fill * side)


def build_template_set(mesh: TriangleMesh, cam: CameraIntrinsics,
                       cfg: CoarseConfig) -> list[Template]:
    """Render the viewsphere template set for one object.

    Poses look at the origin from evenly spread directions at the
    fill-derived radius; every template keeps its geometry map, so each
    pixel knows which model point it sees.
    """
    radius = template_radius(mesh, cam, cfg.fill)
    poses = sample_template_poses(cfg.n_templates, radius, cfg.seed)
    out = []
    for i, pose in enumerate(poses):
        img, geom = render(mesh, pose, cam, shading="textured")
        out.append(Template(image=img, geometry=geom, pose=pose, index=i))
    return out


def _cell_cycle_error(dx_f, dy_f, valid_f, dx_b, dy_b, valid_b):
    """Forward-backward error at cell resolution, in cell units."""
    h, w = dx_f.shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ty = np.rint(ys + dy_f).astype(np.int64)
    tx = np.rint(xs + dx_f).astype(np.int64)
    inside = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    tyc, txc = np.clip(ty, 0, h - 1), np.clip(tx, 0, w - 1)
    err = np.hypot(dx_f + dx_b[tyc, txc], dy_f + dy_b[tyc, txc])
    ok = valid_f & inside & valid_b[tyc, txc]
    return np.where(ok, err, np.inf)


def _polar_signature(gray: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Angular profile of a masked image around the mask centroid.

    Three channels per angular bin: mean radius, maximum radius and mean
    intensity, each z-normalized so that global scale and brightness
    offsets between two views drop out.  Returns (_ROLL_BINS, 3), zeros
    when the mask is empty.
    """
    out = np.zeros((_ROLL_BINS, 3))
    ii, jj = np.nonzero(mask)
    if len(ii) == 0:
        return out
    y = ii + 0.5
    x = jj + 0.5
    cy, cx = y.mean(), x.mean()
    dy, dx = y - cy, x - cx
    r = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    k = np.floor((phi + np.pi) * (_ROLL_BINS / (2.0 * np.pi))).astype(np.int64)
    k = np.clip(k, 0, _ROLL_BINS - 1)
    cnt = np.bincount(k, minlength=_ROLL_BINS)
    denom = np.maximum(cnt, 1)
    out[:, 0] = np.bincount(k, weights=r, minlength=_ROLL_BINS) / denom
    np.maximum.at(out[:, 1], k, r)
    g = gray[ii, jj].astype(np.float64)
    out[:, 2] = np.bincount(k, weights=g, minlength=_ROLL_BINS) / denom
    out -= out.mean(axis=0)
    out /= out.std(axis=0) + 1e-12
    return out


def _signature_correlation(sig_q: np.ndarray, sigs: np.ndarray) -> np.ndarray:
    """Circular correlation of one query signature against a stack.

    ``sigs`` is (n, bins, channels); row s of the result is
    sum_k q[k] t[k - s], the template profile shifted by s bins against
    the query profile, all shifts at once.  Returns (n, bins).
    """
    fq = np.fft.fft(sig_q, axis=0)
    ft = np.fft.fft(sigs, axis=1)
    return np.fft.ifft(fq[None] * np.conj(ft), axis=1).real.sum(axis=2)


def _refine_at(corr: np.ndarray, s: int) -> float:
    """Parabolic sub-bin angle at bin ``s`` of a circular correlation.

    Returns theta in (-pi, pi], snapped to 0.0 below a milliradian so
    identical views take exact fast paths.
    """
    c0, c1, c2 = corr[s - 1], corr[s], corr[(s + 1) % _ROLL_BINS]
    den = c0 - 2.0 * c1 + c2
    frac = 0.0 if abs(den) < 1e-12 else np.clip(0.5 * (c0 - c2) / den,
                                                -0.5, 0.5)
    shift = s + frac
    if shift > _ROLL_BINS / 2:
        shift -= _ROLL_BINS
    theta = 2.0 * np.pi * shift / _ROLL_BINS
    return 0.0 if abs(theta) < 1e-3 else float(theta)


def _peak_to_angle(corr: np.ndarray) -> tuple[float, float]:
    """Sub-bin location and height of the main correlation peak."""
    s = int(np.argmax(corr))
    return _refine_at(corr, s), float(corr[s])


def _query_signature(query: ImageBuffer) -> np.ndarray:
    # background pixels are black in rendered views, so brightness
    # above zero doubles as the query mask
    return _polar_signature(grayscale(query), query.data.max(axis=2) > 1e-6)


def _second_peak_angle(corr: np.ndarray) -> float:
    """Roll at the strongest correlation peak away from the main one.

    Near-symmetric silhouettes (boxes, cylinders seen side-on) give the
    profile correlation two modes roughly half a turn apart, and the
    wrong one wins often enough to matter; this exposes the runner-up so
    the caller can try both.
    """
    s1 = int(np.argmax(corr))
    offsets = np.arange(_ROLL_BINS)
    ring = np.minimum((offsets - s1) % _ROLL_BINS,
                      (s1 - offsets) % _ROLL_BINS)
    s2 = int(np.argmax(np.where(ring > 8, corr, -np.inf)))
    return _refine_at(corr, s2)


def estimate_roll(template: Template, query: ImageBuffer) -> float:
    """In-plane rotation (radians) that best aligns the template view
    with the query, from circular correlation of polar signatures.

    Returns 0.0 when either view is empty; the estimate is signed, in
    (-pi, pi], and snaps below a milliradian to exactly zero.
    """
    sig_q = _query_signature(query)
    if not sig_q.any() or not template.geometry.mask.any():
        return 0.0
    corr = _signature_correlation(sig_q, template.signature[None])[0]
    theta, _ = _peak_to_angle(corr)
    return theta


def _rotate_image(data: np.ndarray, roll: float) -> np.ndarray:
    """Bilinear rotation of (h, w, c) data about the image center;
    content at polar angle phi moves to phi + roll."""
    h, w = data.shape[:2]
    src_x, src_y = _rotated_source_grid(h, w, roll)
    out, _ = bilinear_sample(data, src_x, src_y)
    return out.astype(data.dtype, copy=False)


def _rotated_source_grid(h: int, w: int, roll: float):
    cy, cx = h / 2.0, w / 2.0
    xg, yg = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dx, dy = xg - cx, yg - cy
    cos_t, sin_t = np.cos(roll), np.sin(roll)
    return cx + cos_t * dx + sin_t * dy, cy - sin_t * dx + cos_t * dy


def rotate_template_view(template: Template, roll: float) -> Template:
    """Template as it would look rolled by ``roll`` about the crop center.

    The image is resampled bilinearly, geometry payloads nearest-neighbor;
    coordinate values are model-space points, so they survive the image
    rotation untouched and downstream 2D-3D correspondences stay exact.
    The stored pose is kept verbatim: nothing downstream reads it once
    correspondences exist.
    """
    if roll == 0.0:
        return template
    h, w = template.geometry.mask.shape
    src_x, src_y = _rotated_source_grid(h, w, roll)
    img, _ = bilinear_sample(template.image.data, src_x, src_y)
    coords, _ = nearest_sample(template.geometry.coords, src_x, src_y)
    depth, _ = nearest_sample(template.geometry.depth[:, :, None],
                              src_x, src_y)
    m, ok = nearest_sample(template.geometry.mask[:, :, None]
                           .astype(np.uint8), src_x, src_y)
    mask = (m[:, :, 0] > 0) & ok
    geom = GeometryMap(coords.astype(np.float32) * mask[:, :, None],
                       depth[:, :, 0].astype(np.float32) * mask,
                       mask)
    return Template(image=ImageBuffer(img.astype(np.float32)),
                    geometry=geom, pose=template.pose,
                    index=template.index)


def _score_pair(tmpl_pyramid, query_pyramid, tmpl_mask: np.ndarray,
                flow_cfg: FlowConfig) -> float:
    """Descriptor-matching score of one already-aligned view pair."""
    dx_f, dy_f, val_f, peak = match_pyramids(
        tmpl_pyramid, query_pyramid, flow_cfg.window_radius,
        subpixel=False)
    dx_b, dy_b, val_b, _ = match_pyramids(
        query_pyramid, tmpl_pyramid, flow_cfg.window_radius,
        subpixel=False)
    cyc = _cell_cycle_error(dx_f, dy_f, val_f, dx_b, dy_b, val_b) * 8.0

    if not tmpl_mask.any():
        raise EmptyMask("template has an empty render mask")
    cell_score = np.where(
        val_f & np.isfinite(cyc),
        peak - _FB_WEIGHT * np.minimum(cyc, _FB_CAP_PX),
        _WORST_SCORE)
    # pixel-level mean == cell scores weighted by masked pixels per cell
    ch, cw = cell_score.shape
    counts = tmpl_mask[:ch * 8, :cw * 8].reshape(
        ch, 8, cw, 8).sum(axis=(1, 3))
    total = float((cell_score * counts).sum())
    return total / float(counts.sum())


def score_template(template: Template, query: ImageBuffer,
                   query_pyramid=None,
                   flow_cfg: FlowConfig = FlowConfig(),
                   roll: float | None = None) -> float:
    """Alignment quality of one template against the query.

    The template view is first rolled in-plane to the query (estimated
    when ``roll`` is None): the descriptors underneath are orientation
    sensitive, so without this step any template whose viewpoint is right
    but whose sampled roll is wrong would score as noise.  Every
    template-masked pixel then contributes its matched-cell peak
    correlation minus 0.1 times the cycle error in pixels (capped); cells
    the matcher could not place, or whose round trip breaks, contribute
    the worst possible score, so templates that do not align cannot win
    on a handful of lucky cells.
    """
    if query_pyramid is None:
        query_pyramid = build_feature_pyramid(query)
    if roll is None:
        roll = estimate_roll(template, query)
    view = rotate_template_view(template, roll)
    return _score_pair(view.pyramid, query_pyramid, view.geometry.mask,
                       flow_cfg)


def select_templates(scored: list[ScoredTemplate], k: int
                     ) -> list[ScoredTemplate]:
    """Top-k by score, descending; equal scores keep the lower index."""
    if k > len(scored):
        raise KTooLarge(f"k={k} exceeds {len(scored)} templates")
    order = sorted(scored, key=lambda s: (-s.score, s.template.index))
    return order[:k]


def medoid_vote(maps: list[GeometryMap], mode: str = "medoid"
                ) -> GeometryMap:
    """Fuse per-pixel coordinate candidates across warped template maps.

    medoid: the candidate minimizing the summed Euclidean distance to
    the other candidates at that pixel, ties to the lowest candidate
    index, so the output is always one of the inputs.  mean: plain
    average.  Pixels with no candidate anywhere stay unmasked.
    """
    if not maps:
        raise EmptyMask("no candidate maps to vote over")
    if mode not in ("medoid", "mean"):
        raise ValueError("mode must be 'medoid' or 'mean'")
    h, w = maps[0].mask.shape
    for m in maps:
        if m.mask.shape != (h, w):
            raise EmptyMask("candidate maps disagree in shape")
    coords = np.stack([m.coords.astype(np.float64) for m in maps])  # (k,h,w,3)
    valid = np.stack([m.mask for m in maps])                        # (k,h,w)
    depth = np.stack([m.depth.astype(np.float64) for m in maps])
    n_valid = valid.sum(axis=0)
    out_mask = n_valid > 0

    if mode == "mean":
        wsum = np.where(valid[:, :, :, None], coords, 0.0).sum(axis=0)
        dsum = np.where(valid, depth, 0.0).sum(axis=0)
        denom = np.maximum(n_valid, 1)[:, :, None]
        out_coords = np.where(out_mask[:, :, None], wsum / denom, 0.0)
        out_depth = np.where(out_mask, dsum / np.maximum(n_valid, 1), 0.0)
        return GeometryMap(out_coords, out_depth, out_mask)

    # pairwise distances between candidates, invalid ones pushed out of
    # contention by an additive penalty on their row sums
    diff = coords[:, None] - coords[None, :]            # (k,k,h,w,3)
    dist = np.linalg.norm(diff, axis=4)
    pair_ok = valid[:, None] & valid[None, :]
    dist = np.where(pair_ok, dist, 0.0)
    sums = dist.sum(axis=1)                             # (k,h,w)
    sums = np.where(valid, sums, np.inf)
    winner = np.argmin(sums, axis=0)                    # lowest index wins ties
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out_coords = np.where(out_mask[:, :, None],
                          coords[winner, gy, gx], 0.0)
    out_depth = np.where(out_mask, depth[winner, gy, gx], 0.0)
    return GeometryMap(out_coords, out_depth, out_mask)


def pose_from_candidates(candidates: list[GeometryMap],
                         cam: CameraIntrinsics, cfg: CoarseConfig):
    """Vote the candidate maps down to one and solve PnP on the result.

    Returns (pose, voted_map).  Split out of the full coarse stage so a
    different vote mode or candidate subset can be re-solved without
    re-scoring the template set.

    Raises:
        InsufficientCorrespondences: fewer than 6 voted pixels.
    """
    voted = medoid_vote(candidates, cfg.vote)
    n = int(voted.mask.sum())
    if n < 6:
        raise InsufficientCorrespondences(
            f"only {n} voted pixels after gating")
    ii, jj = np.nonzero(voted.mask)
    pixels = np.stack([jj + 0.5, ii + 0.5], axis=1)
    points = voted.coords[voted.mask].astype(np.float64)
    if len(pixels) > 4000:
        keep = np.linspace(0, len(pixels) - 1, 4000).astype(np.int64)
        pixels, points = pixels[keep], points[keep]
    pose, _ = solve_pnp_ransac(pixels, points, cam, seed=cfg.seed)
    return pose, voted


def estimate_coarse_pose(query: ImageBuffer, query_mask: np.ndarray,
                         templates: list[Template], mesh: TriangleMesh,
                         cam: CameraIntrinsics, cfg: CoarseConfig,
                         flow_cfg: FlowConfig = FlowConfig(),
                         return_candidates: bool = False):
    """Full coarse stage: score, select, warp, vote, solve.

    Candidates live only on query-mask pixels and must survive a 3 px
    (configurable) cycle-consistency gate, which keeps grossly wrong
    template alignments out of the vote.

    Scoring runs in two rounds: the polar-signature correlation both
    estimates every template's in-plane roll and screens the set down to
    the best-aligned fraction, then descriptor matching ranks the
    survivors against the query rotated to each one's quantized roll.
    Template pyramids are built once per set, so the per-query cost is
    one query rotation per occupied roll bin instead of one template
    rotation per template.

    Returns:
        (pose, voted_map, report) with report = {"scores": [...],
        "rolls": [...], "selected": [...]} over template indices
        ("scores" holds None for templates the screen dropped), plus
        "candidates" (the per-template warped maps, selection order)
        when ``return_candidates`` is set.

    Raises:
        KTooLarge: fewer templates than cfg.k.
        InsufficientCorrespondences: fewer than 6 voted pixels.
    """
    if cfg.k > len(templates):
        raise KTooLarge(f"k={cfg.k} exceeds {len(templates)} templates")
    qpyr = build_feature_pyramid(query)
    sig_q = _query_signature(query)
    corr = _signature_correlation(
        sig_q, np.stack([t.signature for t in templates]))
    rolls, peaks = zip(*(_peak_to_angle(row) for row in corr))

    n_keep = max(cfg.k, int(np.ceil(_SCREEN_KEEP * len(templates))))
    order = np.argsort(-np.asarray(peaks), kind="stable")
    survivors = order[:n_keep]
    retry = set(int(i) for i in order[:_ROLL_RETRY])

    # one rotated query pyramid per occupied roll bin; bin 0 reuses the
    # original pyramid
    pyramid_for = {0: qpyr}

    def binned_score(t, roll):
        b = int(np.rint(roll / _QUERY_ROLL_STEP))
        if b not in pyramid_for:
            rotated = _rotate_image(query.data, -b * _QUERY_ROLL_STEP)
            pyramid_for[b] = build_feature_pyramid(ImageBuffer(rotated))
        return _score_pair(t.pyramid, pyramid_for[b], t.geometry.mask,
                           flow_cfg)

    scores: list[float | None] = [None] * len(templates)
    rolls = list(rolls)
    scored = []
    for i in sorted(survivors):
        t = templates[i]
        s = binned_score(t, rolls[i])
        # near-symmetric silhouettes make the profile correlation
        # bimodal; the best-screened templates get a second try at the
        # runner-up roll so a half-turn lock-in cannot bury them
        if i in retry:
            roll2 = _second_peak_angle(corr[i])
            s2 = binned_score(t, roll2)
            if s2 > s:
                s, rolls[i] = s2, roll2
        scores[i] = s
        scored.append(ScoredTemplate(t, s, rolls[i]))
    chosen = select_templates(scored, cfg.k)

    candidates = []
    for st in chosen:
        view = rotate_template_view(st.template, st.roll)
        fwd = estimate_flow(query, view.image, flow_cfg)
        bwd = estimate_flow(view.image, query, flow_cfg)
        cyc = forward_backward_consistency(fwd, bwd)
        gate = np.isfinite(cyc) & (cyc <= cfg.fb_gate_px) & query_mask
        gated = FlowField(du=fwd.du, dv=fwd.dv, valid=fwd.valid & gate)
        candidates.append(warp(view.geometry, gated))

    pose, voted = pose_from_candidates(candidates, cam, cfg)
    report = {"scores": [None if s is None else float(s) for s in scores],
              "rolls": [float(r) for r in rolls],
              "selected": [int(s.template.index) for s in chosen]}
    if return_candidates:
        report["candidates"] = candidates
    return pose, voted, report
