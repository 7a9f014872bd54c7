"""Scene-level driver: crop around the detection mask, run the coarse
template stage, optionally refine, and score the result.

Every entry is processed inside a containment boundary; a failure turns
into an error record and the batch keeps going.  All randomness flows
from the run seed, so identical inputs give identical outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coarse import CoarseConfig, build_template_set, estimate_coarse_pose
from .dataset import cam_from_dict
from .encoding import EncodingConfig, positional_encode
from .errors import Pose6DError
from .evaluation import MetricThresholds, evaluate_record
from .fileio import (read_geometry_map, read_json, read_ppm,
                     read_template_set)
from .geometry import CameraIntrinsics, Pose
from .meshes import TriangleMesh, load_mesh
from .network import GeometryNet, init_geometry_net
from .refine import RefinementConfig, refine_pose
from .render import GeometryMap, ImageBuffer, crop_and_resize, mask_bbox

_STAGES = ("coarse", "full")


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for one batch run; field names match the ablation axes."""

    n_templates: int = 128
    k_selected: int = 4
    vote_mode: str = "medoid"
    attention_mode: str = "cg"
    estimator: str = "geometric"
    stage: str = "full"
    oracle_geometry: bool = False
    iterations: int = 5
    fill: float = 0.8
    crop_pad: float = 1.25
    crop_size: int = 256
    n_freq: int = 5
    keep_candidates: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.stage not in _STAGES:
            raise ValueError("stage must be 'coarse' or 'full'")


@dataclass
class SceneSet:
    """A generated benchmark directory plus evaluation settings."""

    root: Path
    manifest: dict
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)

    @property
    def camera(self) -> CameraIntrinsics:
        return cam_from_dict(self.manifest["camera"])

    @property
    def template_camera(self) -> CameraIntrinsics:
        return cam_from_dict(self.manifest["template_camera"])


def load_scene_set(root, thresholds: MetricThresholds | None = None
                   ) -> SceneSet:
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    return SceneSet(root, manifest, thresholds or MetricThresholds())


def coarse_config_for(obj: dict, cfg: PipelineConfig) -> CoarseConfig:
    """Per-object coarse settings; the template seed from generation
    also drives the PnP consensus draw."""
    return CoarseConfig(n_templates=cfg.n_templates, k=cfg.k_selected,
                        fill=cfg.fill, vote=cfg.vote_mode,
                        seed=obj["template_seed"])


def refinement_config_for(cfg: PipelineConfig) -> RefinementConfig:
    source = "oracle" if cfg.oracle_geometry else "network"
    return RefinementConfig(iterations=cfg.iterations,
                            estimator=cfg.estimator,
                            geometry_source=source,
                            attention=cfg.attention_mode, seed=cfg.seed)


def provide_templates(scenes: SceneSet, obj: dict, mesh: TriangleMesh,
                      ccfg: CoarseConfig) -> list:
    """Load the object's template set, or rebuild it when the requested
    size differs from what generation wrote."""
    droot = scenes.root / obj["templates"]
    pose_file = droot / "pose.json"
    if pose_file.exists():
        n_disk = len(read_json(pose_file)["poses"])
        if n_disk == ccfg.n_templates:
            return read_template_set(droot)
    return build_template_set(mesh, scenes.template_camera, ccfg)


def run_entry(image: ImageBuffer, geometry: GeometryMap,
              mesh: TriangleMesh, templates: list, cam: CameraIntrinsics,
              cfg: PipelineConfig, ccfg: CoarseConfig,
              net: GeometryNet, gt_pose: Pose | None = None) -> dict:
    """One query through crop, coarse stage and refinement.

    The detection mask comes from the entry's geometry map.  Returns a
    dict with "pose" (None on failure), "coarse_pose", "trace",
    "report", "crop_cam" and "error"; exceptions from the pose
    machinery are contained here, never raised.  With
    cfg.keep_candidates the report also carries the per-template
    candidate maps so a caller can re-vote them (they are large; drop
    them once consumed).
    """
    out = {"pose": None, "coarse_pose": None, "trace": None,
           "report": None, "crop_cam": None, "error": None}
    try:
        bbox = mask_bbox(geometry.mask, cfg.crop_pad)
        crop_img, crop_geom, tf = crop_and_resize(
            image, geometry, bbox, cfg.crop_size, cam)
        out["crop_cam"] = tf.cam
        p0, voted, report = estimate_coarse_pose(
            crop_img, crop_geom.mask, templates, mesh, tf.cam, ccfg,
            return_candidates=cfg.keep_candidates)
        out["coarse_pose"] = p0
        out["report"] = report
        if cfg.stage == "coarse":
            out["pose"] = p0
            return out
        rcfg = refinement_config_for(cfg)
        if cfg.oracle_geometry:
            pose, trace = refine_pose(crop_img, crop_geom.mask, p0, mesh,
                                      tf.cam, net, rcfg,
                                      gt_geom=crop_geom, gt_pose=gt_pose)
        else:
            enc = positional_encode(
                voted, EncodingConfig(n_freq=cfg.n_freq,
                                      half_extent=mesh.diameter / 2.0))
            pose, trace = refine_pose(crop_img, crop_geom.mask, p0, mesh,
                                      tf.cam, net, rcfg, geometry=enc,
                                      gt_pose=gt_pose)
        out["pose"] = pose
        out["trace"] = trace
    except (Pose6DError, ValueError) as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def run_scenes(scenes: SceneSet, cfg: PipelineConfig,
               collect=None) -> list:
    """Run the pipeline over every manifest entry and score it.

    Returns evaluation records ordered by entry id.  ``collect`` is an
    optional callback ``(entry, result)`` the command layer uses to
    write per-entry artifacts; record building reuses each entry's
    stored geometry as the ground-truth render.
    """
    net = init_geometry_net(cfg.seed, n_freq=cfg.n_freq)
    cam = scenes.camera
    records = []
    for obj in scenes.manifest["objects"]:
        mesh = load_mesh(scenes.root / obj["mesh"])
        ccfg = coarse_config_for(obj, cfg)
        try:
            templates = provide_templates(scenes, obj, mesh, ccfg)
            obj_error = None
        except (Pose6DError, ValueError, OSError) as exc:
            templates = None
            obj_error = f"{type(exc).__name__}: {exc}"
        for entry in obj["entries"]:
            gt_pose = Pose.from_matrix(np.asarray(entry["pose"]))
            if obj_error is not None:
                result = {"pose": None, "coarse_pose": None, "trace": None,
                          "report": None, "crop_cam": None,
                          "error": obj_error}
                geometry = None
            else:
                image = ImageBuffer(
                    read_ppm(scenes.root / entry["image"]).astype(
                        np.float32) / 255.0)
                geometry = read_geometry_map(scenes.root / entry["geometry"])
                result = run_entry(image, geometry, mesh, templates, cam,
                                   cfg, ccfg, net, gt_pose=gt_pose)
            records.append(evaluate_record(
                entry["id"], result["pose"], gt_pose, mesh, cam,
                scenes.thresholds, gt_geom=geometry))
            if collect is not None:
                collect(entry, result)
        # templates for one object can take ~300 MB with pyramids; let
        # them go before the next object loads
        templates = None
    return records
