"""Synthetic recording workflow: kinematics, renders, ground truth and smoke."""

from .chroma import GT_TAU, SIM_THRESHOLD, binarize_sim, extract_gt, gt_reliability, l1_difference
from .dataset import (
    DatasetError,
    FramePair,
    default_scenes,
    file_hashes,
    generate_dataset,
    load_split,
    load_traces,
    load_video,
    read_pnm,
    read_splits,
    render_frame_pair,
    stack_batch,
    write_manifest,
    write_pnm,
)
from .kinematics import JOINT_COUNTS, KinematicTrace, synthesize_trace
from .scene import (
    PALETTES,
    SceneSpec,
    ToolGeometry,
    rasterize_convex,
    render_scene,
    render_sim,
    silhouette,
    tool_polygons,
    tools_overlap,
)
from .smoke import add_fbm_smoke, fbm, value_noise

__all__ = [
    "DatasetError", "FramePair", "GT_TAU", "JOINT_COUNTS", "KinematicTrace", "PALETTES", "SIM_THRESHOLD",
    "SceneSpec", "ToolGeometry", "add_fbm_smoke", "binarize_sim", "default_scenes", "extract_gt", "fbm",
    "file_hashes", "generate_dataset", "gt_reliability", "l1_difference", "load_split", "load_traces",
    "load_video", "rasterize_convex", "read_pnm", "read_splits", "render_frame_pair", "render_scene",
    "render_sim", "silhouette", "stack_batch", "synthesize_trace", "tool_polygons", "tools_overlap",
    "value_noise", "write_manifest", "write_pnm",
]
