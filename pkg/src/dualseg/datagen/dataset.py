"""On-disk video datasets: generation, netpbm I/O, loading and validation.

Layout::

    root/
      splits.json
      video_01/
        frames/000000.ppm   real RGB frame (binary P6)
        sim/000000.pgm      binarized simulator mask (binary P5, 0/255)
        gt/000000.pgm       green-screen ground truth (binary P5, 0/255)
        kinematics_psm1.csv one row per joint, one column per frame
        kinematics_psm2.csv (two-tool scenes)
        kinematics_ecm.csv
        scene.json          SceneSpec, seeds and per-frame metadata
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .chroma import binarize_sim, extract_gt
from .kinematics import SAMPLE_PERIOD_MS, KinematicTrace, synthesize_trace
from .scene import PALETTES, SceneSpec, ToolGeometry, render_scene, render_sim, tools_overlap

PathLike = Union[str, Path]
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """A dataset file is missing or violates the schema."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass
class FramePair:
    """One training/evaluation sample."""

    real_rgb: np.ndarray
    sim_mask: np.ndarray
    gt_mask: np.ndarray
    frame_index: int
    video_id: str
    occluded: bool = False

    def __post_init__(self):
        hw = self.real_rgb.shape[:2]
        if self.real_rgb.ndim != 3 or self.real_rgb.shape[2] != 3:
            raise ValueError(f"real_rgb must be HxWx3, got {self.real_rgb.shape}")
        if self.sim_mask.shape != hw or self.gt_mask.shape != hw:
            raise ValueError(f"image sizes differ: real {hw}, sim {self.sim_mask.shape}, gt {self.gt_mask.shape}")
        if not np.isin(self.gt_mask, (0, 255)).all():
            raise ValueError("gt_mask must contain only 0 and 255")


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

def write_pnm(path: PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(path, "truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(path, f"unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(path, f"maxval {maxval} is not 255")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raw = data[pos:pos + n]
    if len(raw) != n:
        raise DatasetError(path, f"expected {n} pixel bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DUALSEG_THREADS", "1")))
    except ValueError:
        return 1


def render_frame_pair(spec: SceneSpec, traces: Sequence[KinematicTrace], t: int, video_id: str = "") -> FramePair:
    """Run the full capture workflow for one time step.

    Tissue pass for the input frame, green pass plus a tool-free green shot for
    the ground truth, and a thresholded simulator render for the second input.
    """
    real = render_scene(spec, traces, t, "tissue")
    on_green = render_scene(spec, traces, t, "green", noise_seed=1)
    empty_green = render_scene(spec, traces, t, "green", noise_seed=2, tools=False)
    gt = extract_gt(on_green, empty_green)
    sim = binarize_sim(render_sim(spec, traces, t))
    return FramePair(real, sim, gt, t, video_id, occluded=tools_overlap(spec, traces, t))


def default_scenes(n_videos: int = 14, split: Tuple[int, int, int] = (8, 2, 4), n_tools: int = 2,
                   frame_hw: Tuple[int, int] = (64, 96), seed: int = 0) -> List[Tuple[str, SceneSpec]]:
    """Per-video scene specs; test videos get blood and darker lighting."""
    if sum(split) != n_videos:
        raise ValueError(f"split {split} does not add up to {n_videos} videos")
    rng = np.random.default_rng([seed, 1])
    kinds = [k for k in PALETTES if k != "lamb_kidney"]
    labels = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]
    out = []
    for v, label in enumerate(labels):
        base = ToolGeometry(anchor=(rng.uniform(-0.1, 0.0), rng.uniform(0.85, 1.0)),
                            base_angle=rng.uniform(0.45, 0.75))
        other = ToolGeometry(anchor=(rng.uniform(1.0, 1.1), rng.uniform(0.85, 1.0)),
                             base_angle=np.pi - rng.uniform(0.45, 0.75))
        test = label == "test"
        kind = "lamb_kidney" if test and v % 2 else kinds[v % len(kinds)]
        spec = SceneSpec(
            background_kind=kind,
            illumination_gain=float(rng.uniform(0.55, 0.85) if test else rng.uniform(0.75, 1.15)),
            blood_blob_density=float(rng.uniform(0.6, 1.0)) if test else 0.0,
            tool_geometry=(base, other)[:n_tools],
            rng_seed=int(rng.integers(2**31)),
            frame_hw=frame_hw,
        )
        out.append((label, spec))
    return out


def generate_video(root: PathLike, video_id: str, spec: SceneSpec, traces: Sequence[KinematicTrace],
                   split: str, extra: Optional[dict] = None) -> Path:
    vdir = Path(root) / video_id
    for sub in ("frames", "sim", "gt"):
        (vdir / sub).mkdir(parents=True, exist_ok=True)
    psm = [tr for tr in traces if tr.arm_id.startswith("PSM")]
    n = len(psm[0])

    def one(t):
        pair = render_frame_pair(spec, traces, t, video_id)
        write_pnm(vdir / "frames" / f"{t:06d}.ppm", pair.real_rgb)
        write_pnm(vdir / "sim" / f"{t:06d}.pgm", pair.sim_mask)
        write_pnm(vdir / "gt" / f"{t:06d}.pgm", pair.gt_mask)
        return {"index": t, "occluded": bool(pair.occluded)}

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        frames = list(pool.map(one, range(n)))
    for tr in traces:
        tr.to_csv(vdir / f"kinematics_{tr.arm_id.lower()}.csv")
    meta = {
        "video_id": video_id,
        "split": split,
        "n_frames": n,
        "sample_period_ms": psm[0].sample_period_ms,
        "arms": [tr.arm_id for tr in traces],
        "scene": spec.to_dict(),
        "frames": frames,
    }
    meta.update(extra or {})
    (vdir / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return vdir


def generate_dataset(root: PathLike, specs: Optional[Sequence[SceneSpec]] = None,
                     traces: Optional[Sequence[Sequence[KinematicTrace]]] = None,
                     split: Tuple[int, int, int] = (8, 2, 4), n_frames: int = 30,
                     frame_hw: Tuple[int, int] = (64, 96), n_tools: int = 2, seed: int = 0) -> Path:
    """Write a complete dataset.

    Args:
        root: Output directory (created if missing; its parent must exist).
        specs: One scene per video; defaults to :func:`default_scenes`.
        traces: Per-video PSM/ECM traces; synthesized from ``seed`` if omitted.
        split: Train/val/test video counts, assigned in order.
        n_frames: Frames per video when traces are synthesized.
        frame_hw: Frame size when specs are synthesized.
        n_tools: Tools per scene (1 or 2) when specs are synthesized.
        seed: Master seed.

    Returns:
        The dataset root.
    """
    root = Path(root)
    if not root.parent.exists():
        raise FileNotFoundError(f"parent directory of {root} does not exist")
    n_videos = sum(split)
    if specs is None:
        labelled = default_scenes(n_videos, split, n_tools, frame_hw, seed)
        specs = [s for _, s in labelled]
    if len(specs) != n_videos:
        raise ValueError(f"{len(specs)} scenes for split {split}")
    if traces is None:
        traces = []
        for v, spec in enumerate(specs):
            arms = ["PSM1", "PSM2"][:spec.n_tools] + ["ECM"]
            traces.append([synthesize_trace(a, n_frames, seed * 1000 + 10 * v + k) for k, a in enumerate(arms)])
    if len(traces) != n_videos:
        raise ValueError(f"{len(traces)} trace sets for split {split}")

    labels = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]
    ids = [f"video_{v + 1:02d}" for v in range(n_videos)]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids")
    root.mkdir(exist_ok=True)
    for vid, label, spec, tr in zip(ids, labels, specs, traces):
        generate_video(root, vid, spec, tr, label, {"seed": seed})
    splits = {s: [v for v, l in zip(ids, labels) if l == s] for s in SPLITS}
    (root / "splits.json").write_text(json.dumps(splits, indent=2) + "\n")
    return root


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(path, "missing file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(path, f"invalid JSON ({exc.msg})") from None


def read_splits(root: PathLike) -> Dict[str, List[str]]:
    root = Path(root)
    splits = _read_json(root / "splits.json")
    for s in SPLITS:
        if s not in splits:
            raise DatasetError(root / "splits.json", f"missing split {s!r}")
    return splits


def load_traces(vdir: PathLike) -> List[KinematicTrace]:
    vdir = Path(vdir)
    meta = _read_json(vdir / "scene.json")
    out = []
    for arm in meta.get("arms", []):
        path = vdir / f"kinematics_{arm.lower()}.csv"
        if not path.exists():
            raise DatasetError(path, "missing file")
        try:
            out.append(KinematicTrace.from_csv(path, arm, meta.get("sample_period_ms", SAMPLE_PERIOD_MS)))
        except ValueError as exc:
            raise DatasetError(path, str(exc)) from None
    return out


def load_video(vdir: PathLike) -> List[FramePair]:
    """Read and validate every frame of one video directory."""
    vdir = Path(vdir)
    meta = _read_json(vdir / "scene.json")
    for key in ("video_id", "n_frames", "frames"):
        if key not in meta:
            raise DatasetError(vdir / "scene.json", f"missing key {key!r}")
    pairs = []
    for fr in meta["frames"]:
        t = fr["index"]
        imgs = []
        for sub, ext, nd in (("frames", "ppm", 3), ("sim", "pgm", 2), ("gt", "pgm", 2)):
            path = vdir / sub / f"{t:06d}.{ext}"
            if not path.exists():
                raise DatasetError(path, "missing file")
            img = read_pnm(path)
            if img.ndim != nd:
                raise DatasetError(path, f"expected {'RGB' if nd == 3 else 'grayscale'} image")
            imgs.append(img)
        try:
            pairs.append(FramePair(imgs[0], imgs[1], imgs[2], t, meta["video_id"], bool(fr.get("occluded", False))))
        except ValueError as exc:
            raise DatasetError(vdir / "gt" / f"{t:06d}.pgm", str(exc)) from None
    return pairs


def load_split(root: PathLike, split: str) -> Dict[str, List[FramePair]]:
    """All videos of one split, keyed by video id in split order."""
    root = Path(root)
    splits = read_splits(root)
    if split not in splits:
        raise DatasetError(root / "splits.json", f"unknown split {split!r}")
    return {vid: load_video(root / vid) for vid in splits[split]}


def file_hashes(root: PathLike, exclude: Iterable[str] = ("manifest.json",)) -> Dict[str, str]:
    """SHA-256 of every file under ``root``, keyed by relative POSIX path."""
    root = Path(root)
    skip = set(exclude)
    out = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel in skip:
            continue
        out[rel] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


def write_manifest(root: PathLike) -> Path:
    root = Path(root)
    path = root / "manifest.json"
    path.write_text(json.dumps({"files": file_hashes(root)}, indent=2, sort_keys=True) + "\n")
    return path


def stack_batch(pairs: Sequence[FramePair], dtype=np.float32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Network-ready arrays ``real [B,3,H,W]``, ``sim [B,1,H,W]``, ``gt [B,1,H,W]`` in [0, 1]."""
    real = np.stack([p.real_rgb for p in pairs]).transpose(0, 3, 1, 2).astype(dtype) / 255
    sim = (np.stack([p.sim_mask for p in pairs])[:, None] > 127).astype(dtype)
    gt = (np.stack([p.gt_mask for p in pairs])[:, None] > 127).astype(dtype)
    return real, sim, gt
