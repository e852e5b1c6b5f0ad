"""Transformer explainers: occlusion heatmaps over the spectrogram and
attention rollout with CLS-token importance over time."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dsp import MelSpectrogram
from .errors import InputError

ROW_SUM_TOL = 1e-4
SEGMENT_PERCENTILE = 90.0


@dataclass
class OcclusionConfig:
    box: tuple = (32, 15)       # (height bins, width steps)
    stride: tuple = (16, 7)
    fill: str = "zero"          # zero | one | mean

    def __post_init__(self):
        if min(*self.box, *self.stride) < 1:
            raise InputError("box and stride must be positive")
        if self.fill not in ("zero", "one", "mean"):
            raise InputError(f"unknown fill mode {self.fill!r}")


@dataclass
class OcclusionHeatmap:
    importance: np.ndarray  # per-cell mean |delta| over covering boxes
    base_prob: float
    boxes: list  # (row, col, height, width, delta)


@dataclass
class RolloutMap:
    matrix: np.ndarray  # (N+1, N+1) cumulative attention
    cls_importance: np.ndarray  # length N, sums to 1
    token_time_spans: list
    uniform_fallback: bool = False


def default_occlusion_config(shape) -> OcclusionConfig:
    """Scale the occlusion grid to the input: box = quarter of each dim,
    stride = half the box."""
    H, W = shape
    box = (max(1, H // 4), max(1, W // 4))
    stride = (max(1, box[0] // 2), max(1, box[1] // 2))
    return OcclusionConfig(box=box, stride=stride)


def _fill_value(values: np.ndarray, fill: str) -> float:
    if fill == "zero":
        return 0.0
    if fill == "one":
        return 1.0
    return float(values.mean())


def aggregate_boxes(boxes, shape) -> np.ndarray:
    """Per-cell mean of the deltas of all covering boxes, accumulated in a
    canonical (row, col) order so the result is independent of scan order.
    Uncovered cells stay exactly 0."""
    acc = np.zeros(shape)
    cover = np.zeros(shape)
    for r0, c0, bh, bw, delta in sorted(boxes):
        acc[r0:r0 + bh, c0:c0 + bw] += delta
        cover[r0:r0 + bh, c0:c0 + bw] += 1
    return np.divide(acc, cover, out=np.zeros_like(acc), where=cover > 0)


def occlusion_scan(predict_fn, spec, cfg: OcclusionConfig) -> OcclusionHeatmap:
    """Slide an occlusion box over the spectrogram and record, per position,
    the absolute change in predicted spoof probability.

    Overlapping boxes are aggregated per cell by averaging; cells no box
    covers stay exactly 0.
    """
    values = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec, dtype=np.float64)
    H, W = values.shape
    bh, bw = cfg.box
    sh, sw = cfg.stride
    if bh > H or bw > W:
        raise InputError(f"occlusion box {cfg.box} larger than input {values.shape}")
    base = float(predict_fn(values))
    fill = _fill_value(values, cfg.fill)
    boxes = []
    for r0 in range(0, H - bh + 1, sh):
        for c0 in range(0, W - bw + 1, sw):
            occluded = values.copy()
            occluded[r0:r0 + bh, c0:c0 + bw] = fill
            delta = abs(base - float(predict_fn(occluded)))
            boxes.append((r0, c0, bh, bw, delta))
    return OcclusionHeatmap(aggregate_boxes(boxes, (H, W)), base, boxes)


def layer_attention_maps(record) -> list:
    """Head-averaged attention matrix per layer (rows stay row-stochastic)."""
    layers = getattr(record, "layers", record)
    if not len(layers):
        raise InputError("empty attention record")
    return [np.asarray(a).mean(axis=0) for a in layers]


def rollout(record, residual_mode: str = "plain",
            token_time_spans=None) -> RolloutMap:
    """Cumulative attention: the ordered product of head-averaged per-layer
    matrices. `residual_half` mixes in 0.5 I per layer (re-normalized) before
    multiplying. CLS importance is the CLS query row over non-CLS columns,
    renormalized to sum 1 (uniform fallback if that row carries no mass)."""
    if residual_mode not in ("plain", "residual_half"):
        raise InputError(f"unknown rollout mode {residual_mode!r}")
    maps = layer_attention_maps(record)
    T = maps[0].shape[0]
    for a in maps:
        if a.shape != (T, T):
            raise InputError("attention matrices must share one shape")
        if np.abs(a.sum(axis=1) - 1.0).max() > ROW_SUM_TOL or a.min() < -ROW_SUM_TOL:
            raise InputError("attention matrix is not row-stochastic")
    W = np.eye(T)
    for a in maps:
        if residual_mode == "residual_half":
            a = 0.5 * (a + np.eye(T))
            a = a / a.sum(axis=1, keepdims=True)
        W = W @ a
    cls_row = W[0, 1:]
    total = cls_row.sum()
    if total <= 1e-12:
        cls_importance = np.full(T - 1, 1.0 / (T - 1))
        fallback = True
    else:
        cls_importance = cls_row / total
        fallback = False
    return RolloutMap(W, cls_importance, token_time_spans or [], fallback)


@dataclass
class Timeline:
    segments: list  # (start_ms, end_ms, importance)
    threshold: float
    no_salient_region: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "threshold": self.threshold,
            "no_salient_region": self.no_salient_region,
            "segments": [{"start_ms": s, "end_ms": e, "importance": i}
                         for s, e, i in self.segments],
        }, indent=2)


def cls_timeline(rmap: RolloutMap, percentile: float = SEGMENT_PERCENTILE) -> Timeline:
    """Merge adjacent tokens whose CLS importance exceeds the percentile
    threshold into highlighted time segments."""
    if not rmap.token_time_spans:
        raise InputError("rollout map carries no token time spans")
    imp = rmap.cls_importance
    thr = float(np.percentile(imp, percentile))
    hot = imp > thr
    if not hot.any():
        return Timeline([], thr, no_salient_region=True)
    segments = []
    i = 0
    n = len(imp)
    while i < n:
        if not hot[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and hot[j + 1]:
            j += 1
        start = rmap.token_time_spans[i][0]
        end = rmap.token_time_spans[j][1]
        segments.append((start, end, float(imp[i:j + 1].sum())))
        i = j + 1
    return Timeline(segments, thr)


# ---------------------------------------------------------------------------
# Rendering

def render_heatmap(matrix: np.ndarray, path_stem) -> tuple:
    """Write `<stem>.pgm` (min-max normalized 8-bit grayscale, half-up
    rounding) and `<stem>.csv` (raw values). Returns the two paths."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise InputError("heatmap contains non-finite values")
    lo, hi = m.min(), m.max()
    if hi > lo:
        scaled = (m - lo) / (hi - lo)
        pixels = np.floor(scaled * 255.0 + 0.5).astype(np.uint8)
    else:
        pixels = np.full(m.shape, 128, dtype=np.uint8)
    pgm_path = str(path_stem) + ".pgm"
    csv_path = str(path_stem) + ".csv"
    h, w = m.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())
    with open(csv_path, "w") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return pgm_path, csv_path
