"""Adam training with validation-IoU model selection, and per-video evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint, save_model
from .datagen.dataset import FramePair, load_split, stack_batch
from .datagen.smoke import add_fbm_smoke
from .losses import iou_score, median_iqr, total_loss
from .model import DualSegNet, ModelConfig, binarize, build

logger = logging.getLogger(__name__)

Dataset = Union[str, Path, Mapping[str, Sequence[FramePair]]]


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_steps: int = 500
    val_every: int = 50
    seed: int = 0
    binarize_threshold: float = 0.3

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1, max_steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainState:
    step: int
    net: DualSegNet
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    best_val_iou: float = float("-inf")
    best_checkpoint_path: Optional[str] = None
    best_state: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)
    history: List[dict] = field(default_factory=list, repr=False)

    @property
    def params(self):
        return self.net.params

    @classmethod
    def fresh(cls, net: DualSegNet) -> "TrainState":
        return cls(0, net, {k: np.zeros_like(t.data) for k, t in net.params.items()},
                   {k: np.zeros_like(t.data) for k, t in net.params.items()})

    def best_net(self) -> DualSegNet:
        """Copy of the network holding the best validated weights."""
        from .checkpoint import load_state_into

        net = build(self.net.config, seed=0, dtype=next(iter(self.net.params.values())).dtype)
        return load_state_into(net, self.best_state if self.best_state is not None else self.net.state_dict())

    def optimizer_entries(self) -> Dict[str, np.ndarray]:
        out = {"train.step": np.array([self.step], dtype=np.int64)}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


def adam_step(state: TrainState, grads: Mapping[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update of every parameter, in place."""
    params = state.net.params
    missing = set(params) - set(grads)
    extra = set(grads) - set(params)
    if missing or extra:
        raise KeyError(f"gradient paths do not match parameters: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def _resolve(dataset: Dataset, split: str) -> Dict[str, List[FramePair]]:
    if isinstance(dataset, (str, Path)):
        return load_split(dataset, split)
    pairs = dataset.get(split)
    if pairs is None:
        raise ValueError(f"dataset has no {split!r} split")
    if isinstance(pairs, Mapping):
        return {k: list(v) for k, v in pairs.items()}
    by_video: Dict[str, List[FramePair]] = {}
    for p in pairs:
        by_video.setdefault(p.video_id, []).append(p)
    return by_video


def _flatten(videos: Mapping[str, Sequence[FramePair]]) -> List[FramePair]:
    return [p for v in videos.values() for p in v]


def predict_proba(net: DualSegNet, pairs: Sequence[FramePair], batch_size: int = 8,
                  real_override: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Inference-mode probability maps ``[N, H, W]``."""
    out = []
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            real, sim, _ = stack_batch(chunk)
            if real_override is not None:
                real = np.stack(real_override[i:i + batch_size]).transpose(0, 3, 1, 2).astype(np.float32) / 255
            prob = net.forward(real.astype(net_dtype(net)), sim.astype(net_dtype(net)), training=False)
            out.append(prob.data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,))


def net_dtype(net: DualSegNet):
    return next(iter(net.params.values())).dtype


def mean_iou(net: DualSegNet, pairs: Sequence[FramePair], threshold: float = 0.3) -> float:
    probs = predict_proba(net, pairs)
    return float(np.mean([iou_score(binarize(pr, threshold), p.gt_mask) for pr, p in zip(probs, pairs)]))


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          out_dir: Union[str, Path, None] = None, state: Optional[TrainState] = None,
          model_seed: Optional[int] = None, log: Optional[Callable[[dict], None]] = None) -> TrainState:
    """Train with Adam and keep the weights with the best mean validation IoU.

    Args:
        dataset: Dataset root or a mapping with ``train`` and ``val`` splits.
        model_config: Network configuration.
        train_config: Optimizer and loop settings.
        out_dir: When given, ``best.dseg`` (weights), ``last.dseg``,
            ``optimizer.dseg`` and ``train_log.jsonl`` are written there.
        state: Resume from this state; step numbering continues.
        model_seed: Initialization seed (defaults to ``train_config.seed``).
        log: Optional callback receiving each training-log record.

    Returns:
        The final :class:`TrainState`; ``best_checkpoint_path`` points at the
        best validated weights.
    """
    cfg = train_config
    train_pairs = _flatten(_resolve(dataset, "train"))
    val_pairs = _flatten(_resolve(dataset, "val"))
    if not train_pairs or not val_pairs:
        raise ValueError("train and val splits must both be non-empty")
    if state is None:
        state = TrainState.fresh(build(model_config, seed=cfg.seed if model_seed is None else model_seed))
    net = state.net
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a")

    rng = np.random.default_rng([cfg.seed, state.step])
    order = rng.permutation(len(train_pairs))
    cursor = 0
    dtype = net_dtype(net)
    try:
        target = state.step + cfg.max_steps
        while state.step < target:
            if cursor + cfg.batch_size > len(order):
                order = rng.permutation(len(train_pairs))
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            real, sim, gt = stack_batch([train_pairs[i] for i in idx], dtype=dtype)

            for p in net.params.values():
                p.zero_grad()
            prob = net.forward(real, sim, training=True)
            loss = total_loss(prob, gt)
            backward(loss.total)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in net.params.items()}
            adam_step(state, grads, cfg)

            record = {"step": state.step, **loss.as_dict(), "val_iou": None}
            if state.step % cfg.val_every == 0 or state.step == target:
                val = mean_iou(net, val_pairs, cfg.binarize_threshold)
                record["val_iou"] = val
                if val > state.best_val_iou:
                    state.best_val_iou = val
                    state.best_state = {k: np.array(v, copy=True) for k, v in net.state_dict().items()}
                    if out is not None:
                        save_model(out / "best.dseg", net)
                        state.best_checkpoint_path = str(out / "best.dseg")
                logger.info("step %d loss %.4f val IoU %.4f", state.step, record["loss_total"], val)
            state.history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if log is not None:
                log(record)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_model(out / "last.dseg", net)
        save_checkpoint(out / "optimizer.dseg", state.optimizer_entries())
    return state


def resume_state(net: DualSegNet, optimizer_path: Union[str, Path]) -> TrainState:
    """Rebuild a TrainState from a model and a saved ``optimizer.dseg``."""
    entries = load_checkpoint(optimizer_path)
    state = TrainState.fresh(net)
    state.step = int(entries["train.step"][0])
    for k in state.m:
        state.m[k] = entries[f"adam.m.{k}"].astype(state.m[k].dtype)
        state.v[k] = entries[f"adam.v.{k}"].astype(state.v[k].dtype)
    return state


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class VideoResult:
    video_id: str
    scores: List[float]
    smoke_scores: Optional[List[float]] = None

    @property
    def no_smoke(self) -> Tuple[float, float]:
        return median_iqr(self.scores)

    @property
    def smoke(self) -> Optional[Tuple[float, float]]:
        return median_iqr(self.smoke_scores) if self.smoke_scores else None


@dataclass
class EvalReport:
    """Per-video median/IQR IoU with and without smoke, plus the occlusion subset."""

    videos: List[VideoResult]
    occlusion_scores: List[float] = field(default_factory=list)
    occlusion_smoke_scores: List[float] = field(default_factory=list)
    with_smoke: bool = False

    def overall(self, smoke: bool = False) -> Optional[Tuple[float, float]]:
        vals = [s for v in self.videos for s in ((v.smoke_scores or []) if smoke else v.scores)]
        return median_iqr(vals) if vals else None

    def occlusion(self, smoke: bool = False) -> Optional[Tuple[float, float]]:
        vals = self.occlusion_smoke_scores if smoke else self.occlusion_scores
        return median_iqr(vals) if vals else None

    def records(self) -> List[dict]:
        """One record per (video, condition), then overall and occlusion rows."""
        out = []
        conditions = ["no_smoke", "smoke"] if self.with_smoke else ["no_smoke"]

        def rec(video, cond, stats, n):
            return {"video": video, "condition": cond, "n_frames": n,
                    "median_iou": None if stats is None else round(100 * stats[0], 6),
                    "iqr_iou": None if stats is None else round(100 * stats[1], 6)}

        for v in self.videos:
            for cond in conditions:
                out.append(rec(v.video_id, cond, v.smoke if cond == "smoke" else v.no_smoke, len(v.scores)))
        n_all = sum(len(v.scores) for v in self.videos)
        for cond in conditions:
            out.append(rec("overall", cond, self.overall(cond == "smoke"), n_all))
        for cond in conditions:
            out.append(rec("occlusion", cond, self.occlusion(cond == "smoke"), len(self.occlusion_scores)))
        return out

    def format_table(self) -> str:
        def cell(stats):
            return "-" if stats is None else f"{100 * stats[0]:.2f}/{100 * stats[1]:.2f}"

        lines = ["Median Value (%) / IQR (%) of IoU score", ""]
        head = f"{'':<12}{'No smoke':>14}"
        if self.with_smoke:
            head += f"{'Added smoke':>14}"
        lines.append(head)
        lines.append("-" * len(head))
        for i, v in enumerate(self.videos, start=1):
            row = f"{'Video ' + str(i):<12}{cell(v.no_smoke):>14}"
            if self.with_smoke:
                row += f"{cell(v.smoke):>14}"
            lines.append(row + f"   ({v.video_id}, {len(v.scores)} frames)")
        lines.append("-" * len(head))
        row = f"{'Overall':<12}{cell(self.overall()):>14}"
        if self.with_smoke:
            row += f"{cell(self.overall(True)):>14}"
        lines.append(row)
        lines.append("")
        lines.append(f"Occlusion frames ({len(self.occlusion_scores)} frames)")
        row = f"{'All videos':<12}{cell(self.occlusion()):>14}"
        if self.with_smoke:
            row += f"{cell(self.occlusion(True)):>14}"
        lines.append(row)
        return "\n".join(lines) + "\n"


def smoke_seed(seed: int, video_id: str, frame_index: int) -> int:
    """Per-frame smoke seed derived from the run seed, video and frame."""
    vid = int("".join(ch for ch in video_id if ch.isdigit()) or 0)
    return int(np.random.SeedSequence([seed, vid, frame_index]).generate_state(1)[0])


Predictor = Callable[[Sequence[FramePair], Optional[Sequence[np.ndarray]]], np.ndarray]


def model_predictor(net: DualSegNet) -> Predictor:
    return lambda pairs, real=None: predict_proba(net, pairs, real_override=real)


def oracle_predictor(pairs, real=None) -> np.ndarray:
    """Feeds the ground truth back as the prediction."""
    return np.stack([(p.gt_mask > 127).astype(np.float64) for p in pairs])


def sim_predictor(pairs, real=None) -> np.ndarray:
    """Kinematics-only baseline: the rendered simulation mask is the prediction."""
    return np.stack([(p.sim_mask > 127).astype(np.float64) for p in pairs])


def evaluate(model: Union[DualSegNet, Predictor, str, Path], videos: Mapping[str, Sequence[FramePair]],
             with_smoke: bool = False, seed: int = 0, threshold: float = 0.3,
             config: Optional[ModelConfig] = None) -> EvalReport:
    """Hard IoU per frame, summarized per video as median/IQR.

    Args:
        model: A network, a checkpoint path (needs ``config``) or a predictor
            callable ``(pairs, real_frames_or_None) -> [N, H, W]`` probabilities.
        videos: Frames of the evaluated split keyed by video id.
        with_smoke: Also score every frame after adding FBM smoke to the real
            image, seeded per frame from ``seed``.
        seed: Smoke seed.
        threshold: Binarization threshold for the probability maps.
        config: Model config when ``model`` is a checkpoint path.
    """
    if isinstance(model, (str, Path)):
        from .checkpoint import load_model

        if config is None:
            raise ValueError("evaluating a checkpoint path needs the model config")
        model = load_model(model, config)
    predictor = model_predictor(model) if isinstance(model, DualSegNet) else model
    if not videos:
        raise ValueError("no videos to evaluate")

    results = []
    occ, occ_smoke = [], []
    for vid, pairs in videos.items():
        pairs = list(pairs)
        probs = predictor(pairs, None)
        scores = [iou_score(binarize(pr, threshold), p.gt_mask) for pr, p in zip(probs, pairs)]
        smoke_scores = None
        if with_smoke:
            smoked = [add_fbm_smoke(p.real_rgb, smoke_seed(seed, vid, p.frame_index)) for p in pairs]
            sprobs = predictor(pairs, smoked)
            smoke_scores = [iou_score(binarize(pr, threshold), p.gt_mask) for pr, p in zip(sprobs, pairs)]
        for k, p in enumerate(pairs):
            if p.occluded:
                occ.append(scores[k])
                if smoke_scores is not None:
                    occ_smoke.append(smoke_scores[k])
        results.append(VideoResult(vid, scores, smoke_scores))
    return EvalReport(results, occ, occ_smoke, with_smoke)
