"""Procedural stand-in for the robot, the tissue set-up and the tool simulator.

A tool is a planar chain: a shaft from a fixed entry point, one wrist link
and two jaws. Four of the seven PSM joints drive it::

    row 0  base rotation   -> shaft angle
    row 1  elbow           -> wrist-link angle relative to the shaft
    row 4  wrist           -> jaw axis angle relative to the link
    row 5  jaw opening     -> angle between the two jaws

Rows 2, 3 and 6 have no planar effect. Every part is a convex polygon, so
rasterization is a half-plane test at pixel centres.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .kinematics import ROW_BASE, ROW_ELBOW, ROW_JAW, ROW_WRIST, KinematicTrace
from .smoke import fbm

PALETTES: Dict[str, Tuple[int, int, int]] = {
    "chicken_breast": (228, 188, 170),
    "chicken_back": (222, 196, 150),
    "lamb_loin": (168, 62, 66),
    "pork_loin": (214, 140, 132),
    "beef_sirloin": (140, 36, 40),
    "lamb_kidney": (112, 40, 38),
}
SHAFT_RGB = (40, 40, 46)
METAL_RGB = (175, 178, 182)
GREEN_RGB = (0, 255, 0)
BLOOD_RGB = (150, 8, 12)
BACKDROPS = ("tissue", "green", "none")


@dataclass(frozen=True)
class ToolGeometry:
    """Tool dimensions; positions are fractions of (W, H), lengths fractions of min(H, W)."""

    anchor: Tuple[float, float] = (-0.05, 0.95)
    base_angle: float = 0.6
    shaft_length: float = 0.75
    shaft_width: float = 0.16
    link_length: float = 0.16
    link_width: float = 0.14
    jaw_length: float = 0.2
    jaw_width: float = 0.12

    def mirrored(self) -> "ToolGeometry":
        return replace(self, anchor=(1.0 - self.anchor[0], self.anchor[1]), base_angle=np.pi - self.base_angle)


@dataclass(frozen=True)
class SceneSpec:
    """Everything besides the kinematics that determines a rendered video."""

    background_kind: str = "chicken_breast"
    illumination_gain: float = 1.0
    blood_blob_density: float = 0.0
    tool_geometry: Tuple[ToolGeometry, ...] = field(default_factory=lambda: (ToolGeometry(), ToolGeometry().mirrored()))
    rng_seed: int = 0
    frame_hw: Tuple[int, int] = (64, 96)
    sensor_noise: float = 2.0
    sim_joint_bias: float = 0.06
    sim_offset_px: float = 1.5

    def __post_init__(self):
        if self.background_kind not in PALETTES:
            raise ValueError(f"unknown background_kind {self.background_kind!r}")
        object.__setattr__(self, "tool_geometry", tuple(
            g if isinstance(g, ToolGeometry) else ToolGeometry(**g) for g in self.tool_geometry))
        object.__setattr__(self, "frame_hw", tuple(int(v) for v in self.frame_hw))

    @property
    def n_tools(self) -> int:
        return len(self.tool_geometry)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_hw"] = list(self.frame_hw)
        d["tool_geometry"] = [{**g, "anchor": list(g["anchor"])} for g in d["tool_geometry"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["tool_geometry"] = tuple(ToolGeometry(**{**g, "anchor": tuple(g["anchor"])}) for g in d["tool_geometry"])
        return cls(**d)


# ---------------------------------------------------------------------------
# kinematics -> polygons
# ---------------------------------------------------------------------------

def _direction(theta: float) -> np.ndarray:
    # image y axis points down, angles are counter-clockwise on screen
    return np.array([np.cos(theta), -np.sin(theta)])


def _bar(a: np.ndarray, b: np.ndarray, width: float, theta: float) -> np.ndarray:
    n = np.array([np.sin(theta), np.cos(theta)]) * width / 2
    return np.array([a + n, b + n, b - n, a - n])


def _octagon(center: np.ndarray, radius: float) -> np.ndarray:
    ang = np.pi / 8 + np.arange(8) * np.pi / 4
    return center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def tool_polygons(geom: ToolGeometry, q: np.ndarray, frame_hw: Tuple[int, int]) -> Dict[str, np.ndarray]:
    """Convex parts of one tool in pixel coordinates ``(x, y)``.

    Returns:
        Ordered mapping of part name to ``[n, 2]`` vertex array: ``shaft``,
        ``elbow``, ``link``, ``wrist``, ``jaw_a``, ``jaw_b``.
    """
    h, w = frame_hw
    s = float(min(h, w))
    a = np.array([geom.anchor[0] * w, geom.anchor[1] * h])
    t1 = geom.base_angle + q[ROW_BASE]
    b = a + geom.shaft_length * s * _direction(t1)
    t2 = t1 + q[ROW_ELBOW]
    c = b + geom.link_length * s * _direction(t2)
    t3 = t2 + q[ROW_WRIST]
    parts = {
        "shaft": _bar(a, b, geom.shaft_width * s, t1),
        "elbow": _octagon(b, geom.link_width * s / 2),
        "link": _bar(b, c, geom.link_width * s, t2),
        "wrist": _octagon(c, geom.jaw_width * s / 2),
    }
    for name, sign in (("jaw_a", 1.0), ("jaw_b", -1.0)):
        tj = t3 + sign * q[ROW_JAW] / 2
        n = np.array([np.sin(tj), np.cos(tj)]) * geom.jaw_width * s / 2
        tip = c + geom.jaw_length * s * _direction(tj)
        parts[name] = np.array([c + n, tip, c - n])
    return parts


def rasterize_convex(poly: np.ndarray, frame_hw: Tuple[int, int], supersample: int = 1) -> np.ndarray:
    """Coverage of a convex polygon sampled at pixel (sub-)centres.

    With ``supersample == 1`` the result is boolean (centre inside or on the
    boundary); otherwise it is the fraction of ``supersample**2`` sub-samples
    covered.
    """
    h, w = frame_hw
    k = supersample
    out = np.zeros((h, w), dtype=bool if k == 1 else np.float64)
    # only pixels in the polygon's bounding box can be covered
    x_lo = max(0, int(np.floor(poly[:, 0].min())))
    x_hi = min(w, int(np.ceil(poly[:, 0].max())) + 1)
    y_lo = max(0, int(np.floor(poly[:, 1].min())))
    y_hi = min(h, int(np.ceil(poly[:, 1].max())) + 1)
    if x_lo >= x_hi or y_lo >= y_hi:
        return out
    offs = (np.arange(k) + 0.5) / k
    ys = (np.arange(y_lo, y_hi)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(x_lo, x_hi)[:, None] + offs[None, :]).ravel()
    px, py = np.meshgrid(xs, ys)
    inside_pos = np.ones(px.shape, dtype=bool)
    inside_neg = np.ones(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside_pos &= cross >= 0
        inside_neg &= cross <= 0
    inside = inside_pos | inside_neg
    if k == 1:
        out[y_lo:y_hi, x_lo:x_hi] = inside
    else:
        out[y_lo:y_hi, x_lo:x_hi] = inside.reshape(y_hi - y_lo, k, x_hi - x_lo, k).mean(axis=(1, 3))
    return out


def tool_masks(spec: SceneSpec, joint_vectors: Sequence[np.ndarray], supersample: int = 1):
    """Per-tool ``(shaft, metal)`` coverage maps."""
    out = []
    for geom, q in zip(spec.tool_geometry, joint_vectors):
        parts = tool_polygons(geom, q, spec.frame_hw)
        cov = {name: rasterize_convex(p, spec.frame_hw, supersample) for name, p in parts.items()}
        if supersample == 1:
            shaft = cov["shaft"]
            metal = (cov["elbow"] | cov["link"] | cov["wrist"] | cov["jaw_a"] | cov["jaw_b"]) & ~shaft
        else:
            shaft = cov["shaft"]
            metal = np.maximum.reduce([cov[k] for k in ("elbow", "link", "wrist", "jaw_a", "jaw_b")])
        out.append((shaft, metal))
    return out


def _joints_at(traces: Sequence[KinematicTrace], t: int) -> List[np.ndarray]:
    return [tr.at(t) for tr in traces if tr.arm_id.startswith("PSM")]


def silhouette(spec: SceneSpec, traces: Sequence[KinematicTrace], t: int) -> np.ndarray:
    """Union of all tool parts as a boolean mask."""
    masks = tool_masks(spec, _joints_at(traces, t))
    out = np.zeros(spec.frame_hw, dtype=bool)
    for shaft, metal in masks:
        out |= shaft | metal
    return out


def tools_overlap(spec: SceneSpec, traces: Sequence[KinematicTrace], t: int) -> bool:
    """True when two tools cover a common pixel (an occlusion frame)."""
    masks = [s | m for s, m in tool_masks(spec, _joints_at(traces, t))]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.any(masks[i] & masks[j]):
                return True
    return False


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _backdrop_code(backdrop: str) -> int:
    return BACKDROPS.index(backdrop)


def tissue_background(spec: SceneSpec) -> np.ndarray:
    """Static textured tissue image (float RGB, before illumination)."""
    h, w = spec.frame_hw
    base = np.array(PALETTES[spec.background_kind], dtype=np.float64)
    coarse = fbm(h, w, spec.rng_seed * 7 + 1, octaves=4, cell=max(h, w) / 3)
    fine = fbm(h, w, spec.rng_seed * 7 + 2, octaves=3, cell=max(h, w) / 12)
    shade = 0.75 + 0.35 * coarse + 0.12 * (fine - 0.5)
    img = base[None, None, :] * shade[..., None]
    # fat streaks / specular patches
    streak = fbm(h, w, spec.rng_seed * 7 + 3, octaves=2, cell=max(h, w) / 5)
    img += 60.0 * np.clip(streak - 0.75, 0, None)[..., None] * 4
    return img


def _blood_layout(spec: SceneSpec):
    """Static background blobs and tool-attached blobs for a video."""
    rng = np.random.default_rng([spec.rng_seed, 977])
    h, w = spec.frame_hw
    s = min(h, w)
    n_bg = int(round(spec.blood_blob_density * 6))
    n_tool = int(round(spec.blood_blob_density * 3))
    bg = [(rng.uniform(0, w), rng.uniform(0, h), rng.uniform(0.04, 0.12) * s) for _ in range(n_bg)]
    tool = [(int(rng.integers(spec.n_tools)), rng.uniform(0.45, 1.0), rng.uniform(0.06, 0.1) * s) for _ in range(n_tool)]
    return bg, tool


def _disc(frame_hw, cx, cy, r) -> np.ndarray:
    h, w = frame_hw
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def render_scene(spec: SceneSpec, traces: Union[KinematicTrace, Sequence[KinematicTrace]], t: int,
                 backdrop: str = "tissue", noise_seed: int = 0, tools: bool = True) -> np.ndarray:
    """Render one frame of the scene.

    Args:
        spec: Scene description.
        traces: PSM traces (ECM traces are accepted and ignored); one per tool.
        t: Time step.
        backdrop: ``tissue`` (textured, lit, optionally bloody), ``green``
            (flat (0,255,0) screen) or ``none`` (white silhouette on black).
        noise_seed: Selects the sensor-noise draw; repeated recordings of the
            same motion use different values.
        tools: Set False for the empty-background reference shot.

    Returns:
        ``uint8`` array, ``H x W x 3`` for ``tissue``/``green`` and ``H x W``
        for ``none``.
    """
    if backdrop not in BACKDROPS:
        raise ValueError(f"backdrop must be one of {BACKDROPS}, got {backdrop!r}")
    if isinstance(traces, KinematicTrace):
        traces = [traces]
    h, w = spec.frame_hw
    masks = tool_masks(spec, _joints_at(traces, t)) if tools else []

    if backdrop == "none":
        out = np.zeros((h, w), dtype=np.uint8)
        for shaft, metal in masks:
            out[shaft | metal] = 255
        return out

    if backdrop == "green":
        img = np.empty((h, w, 3))
        img[...] = GREEN_RGB
        gain = 1.0
    else:
        img = tissue_background(spec)
        gain = spec.illumination_gain
        bg_blood, _ = _blood_layout(spec)
        for cx, cy, r in bg_blood:
            img[_disc(spec.frame_hw, cx, cy, r)] = BLOOD_RGB
    for shaft, metal in masks:
        img[shaft] = SHAFT_RGB
        img[metal] = METAL_RGB
    if backdrop == "tissue" and masks:
        _, tool_blood = _blood_layout(spec)
        joints = _joints_at(traces, t)
        for k, frac, r in tool_blood:
            parts = tool_polygons(spec.tool_geometry[k], joints[k], spec.frame_hw)
            a, b = parts["shaft"][:2].mean(axis=0), parts["shaft"][2:].mean(axis=0)
            c = parts["link"][1:3].mean(axis=0)
            # blobs ride along shaft end and wrist link
            p = a + (b - a) * frac if frac < 0.9 else b + (c - b) * (frac - 0.9) * 10
            blob = _disc(spec.frame_hw, p[0], p[1], r)
            img[blob & (masks[k][0] | masks[k][1])] = BLOOD_RGB
    img = img * gain
    if spec.sensor_noise > 0:
        rng = np.random.default_rng([spec.rng_seed, t, _backdrop_code(backdrop), noise_seed])
        img = img + rng.normal(0.0, spec.sensor_noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sim_joint_vectors(spec: SceneSpec, traces: Sequence[KinematicTrace], t: int) -> List[np.ndarray]:
    """Joint values as the simulator sees them: recorded values plus a fixed calibration bias."""
    rng = np.random.default_rng([spec.rng_seed, 4242])
    out = []
    for q in _joints_at(traces, t):
        bias = rng.normal(0.0, spec.sim_joint_bias, q.shape)
        bias[ROW_JAW] = 0.0
        out.append(q + bias)
    return out


def render_sim(spec: SceneSpec, traces: Sequence[KinematicTrace], t: int, supersample: int = 4) -> np.ndarray:
    """Anti-aliased grayscale simulator render from (slightly miscalibrated) kinematics."""
    if isinstance(traces, KinematicTrace):
        traces = [traces]
    rng = np.random.default_rng([spec.rng_seed, 4243])
    shift = rng.normal(0.0, 1.0, 2)
    shift = shift / max(np.linalg.norm(shift), 1e-12) * spec.sim_offset_px
    cover = np.zeros(spec.frame_hw)
    for geom, q in zip(spec.tool_geometry, sim_joint_vectors(spec, traces, t)):
        for poly in tool_polygons(geom, q, spec.frame_hw).values():
            cover = np.maximum(cover, rasterize_convex(poly + shift, spec.frame_hw, supersample))
    return np.clip(np.rint(cover * 255), 0, 255).astype(np.uint8)
