"""Evaluation harness: 1 input frame -> multi-step rollout, MSE and a
pluggable perceptual metric, segmentation/object metrics against the
synthetic ground truth, and a copy-last-frame baseline."""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import worldgen
from .dynamics import associate, entity_from_detection, select_entities
from .generator import gamma_paste
from .segmenter import frame_to_tensor


class ShapeError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass
class EvalReport:
    mse_mean: float
    mse_stderr: float
    perceptual_mean: float
    perceptual_stderr: float
    seg_miou: float
    box_l2_mean: float
    baseline_mse_mean: float
    n_sequences: int
    n_skipped: int = 0
    per_step_mse: list = None
    per_step_perceptual: list = None

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1)

    def to_text(self):
        rows = [
            ("MSE", f"{self.mse_mean:.6f} ± {self.mse_stderr:.6f}"),
            ("Perceptual", f"{self.perceptual_mean:.6f} ± {self.perceptual_stderr:.6f}"),
            ("Baseline MSE (copy)", f"{self.baseline_mse_mean:.6f}"),
            ("Seg mIoU (frame 0)", f"{self.seg_miou:.4f}"),
            ("Box L2 (px)", f"{self.box_l2_mean:.3f}"),
            ("Sequences", f"{self.n_sequences} ({self.n_skipped} skipped)"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {val}" for name, val in rows)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(pred, target):
    """Mean over pixels and channels of the squared difference."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


class PerceptualMetric:
    def distance(self, a, b):
        raise NotImplementedError


class RandomConvPerceptual(PerceptualMetric):
    """Distance between unit-normalized feature maps of a fixed-seed random
    3-layer conv net.  Stands in for a pretrained perceptual metric; any
    PerceptualMetric implementation can be swapped in."""

    def __init__(self, seed=0):
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1),
        )
        for p in self.net.parameters():
            p.requires_grad_(False)

    def _features(self, frame):
        x = frame_to_tensor(np.asarray(frame, dtype=np.float32))[None]
        feats = []
        h = x
        for layer in self.net:
            h = layer(h)
            if isinstance(layer, nn.Conv2d):
                feats.append(h)
        return feats

    def distance(self, a, b):
        with torch.no_grad():
            fa, fb = self._features(a), self._features(b)
            total = 0.0
            for xa, xb in zip(fa, fb):
                na = xa / (xa.norm(dim=1, keepdim=True) + 1e-8)
                nb = xb / (xb.norm(dim=1, keepdim=True) + 1e-8)
                total += float(((na - nb) ** 2).mean())
        return total / len(fa)


def perceptual(pred, target, metric):
    return metric.distance(pred, target)


# ---------------------------------------------------------------------------
# Rollout without ground truth
# ---------------------------------------------------------------------------

def predict_rollout(models, frame0, horizon, detect_threshold=0.5, max_entities=5):
    """Autoregressive prediction from a single frame; consumes no future GT.

    Returns (frames, per_step_entities) where frames is a list of (H, W, 3)
    arrays of length horizon, or (None, None) if nothing was detected.
    """
    with torch.no_grad():
        dets = models.segmenter.detect(frame0, detect_threshold)
        if not dets:
            return None, None
        entities = select_entities(dets, max_entities)
        i_prev = frame_to_tensor(np.asarray(frame0, dtype=np.float32))
        frames, steps = [], []
        for _ in range(horizon):
            dyn = models.dynamics.step(entities)
            comp = models.generator.generate(i_prev, entities, dyn)
            frames.append(comp.I_final.permute(1, 2, 0).numpy())
            steps.append(dyn)
            entities = dyn
            i_prev = comp.I_final
        return frames, steps


# ---------------------------------------------------------------------------
# Object-level metrics
# ---------------------------------------------------------------------------

def _mask_iou(a, b):
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return inter / union if union else 0.0


def segmentation_miou(models, seq, detect_threshold=0.5):
    """Mean best IoU of frame-0 detection masks against GT block masks."""
    with torch.no_grad():
        dets = models.segmenter.detect(seq.frames[0], detect_threshold)
    h, w = seq.frames[0].shape[:2]
    det_masks = [(gamma_paste(d.mask, d.box, h, w).numpy() > 0.5) for d in dets]
    ious = []
    for gt in seq.masks[0]:
        if not gt.any():
            continue
        best = max((_mask_iou(gt, m) for m in det_masks), default=0.0)
        ious.append(best)
    return float(np.mean(ious)) if ious else float("nan")


@dataclass
class _BoxOnly:
    id: int
    box: torch.Tensor


def box_l2_error(step_entities, gt_boxes_per_step):
    """Mean L2 norm between predicted and GT box corner vectors, matched by
    centroid with no distance cap (evaluation-only association)."""
    errs = []
    for entities, gt_boxes in zip(step_entities, gt_boxes_per_step):
        valid = [b for b in gt_boxes if (b[2] - b[0]) > 0 and (b[3] - b[1]) > 0]
        if not entities or not valid:
            continue
        gt_entities = [_BoxOnly(id=j, box=torch.tensor(b, dtype=torch.float32))
                       for j, b in enumerate(valid)]
        matching = associate(entities, gt_entities, cap=math.inf)
        for e in entities:
            j = matching.get(e.id)
            if j is not None:
                diff = e.box.detach().numpy() - np.asarray(valid[j], dtype=np.float64)
                errs.append(float(np.linalg.norm(diff)))
    return float(np.mean(errs)) if errs else float("nan")


# ---------------------------------------------------------------------------
# Harness
# ---------------------------------------------------------------------------

def _mean_stderr(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    se = arr.std(ddof=1) / np.sqrt(arr.size) if arr.size > 1 else 0.0
    return float(arr.mean()), float(se)


def evaluate(models, manifest, split="test", horizon=3, metric=None,
             detect_threshold=0.5, dump_dir=None):
    """Per-sequence rollouts + metrics; GT is touched only at frame 0 and
    for scoring."""
    ids = manifest.ids(split)
    if not ids:
        raise EmptySplitError(f"split {split!r} has no sequences")
    metric = metric or RandomConvPerceptual()

    seq_mse, seq_perc, seq_base = [], [], []
    step_mse_acc, step_perc_acc = None, None
    mious, box_errs = [], []
    skipped = 0
    for seq_id in ids:
        seq = worldgen.load_sequence(manifest, seq_id)
        h = min(horizon, len(seq.frames) - 1)
        pred_frames, step_entities = predict_rollout(models, seq.frames[0], h,
                                                     detect_threshold)
        if pred_frames is None:
            skipped += 1
            continue
        targets = seq.frames[1:h + 1]
        ms = [mse(p, t) for p, t in zip(pred_frames, targets)]
        ps = [perceptual(p, t, metric) for p, t in zip(pred_frames, targets)]
        bs = [mse(seq.frames[0], t) for t in targets]
        seq_mse.append(np.mean(ms))
        seq_perc.append(np.mean(ps))
        seq_base.append(np.mean(bs))
        if step_mse_acc is None:
            step_mse_acc = [[] for _ in range(h)]
            step_perc_acc = [[] for _ in range(h)]
        for i in range(h):
            step_mse_acc[i].append(ms[i])
            step_perc_acc[i].append(ps[i])
        mious.append(segmentation_miou(models, seq, detect_threshold))
        box_errs.append(box_l2_error(step_entities, seq.boxes[1:h + 1]))
        if dump_dir:
            _dump_strip(dump_dir, seq_id, seq.frames[0], pred_frames, targets)

    if not seq_mse:
        raise EmptySplitError(f"all {len(ids)} sequences in {split!r} were skipped")
    mse_mean, mse_se = _mean_stderr(seq_mse)
    perc_mean, perc_se = _mean_stderr(seq_perc)
    return EvalReport(
        mse_mean=mse_mean, mse_stderr=mse_se,
        perceptual_mean=perc_mean, perceptual_stderr=perc_se,
        seg_miou=float(np.nanmean(mious)),
        box_l2_mean=float(np.nanmean(box_errs)),
        baseline_mse_mean=float(np.mean(seq_base)),
        n_sequences=len(seq_mse), n_skipped=skipped,
        per_step_mse=[float(np.mean(v)) for v in step_mse_acc],
        per_step_perceptual=[float(np.mean(v)) for v in step_perc_acc],
    )


def _dump_strip(dump_dir, seq_id, frame0, pred_frames, targets):
    """GT strip over predicted strip, one PNG per sequence."""
    os.makedirs(dump_dir, exist_ok=True)
    h, w = frame0.shape[:2]
    n = 1 + len(pred_frames)
    sheet = np.ones((2 * h + 2, n * (w + 2), 3), dtype=np.float32)
    row0 = [frame0] + list(targets)
    row1 = [frame0] + list(pred_frames)
    for c, (top, bot) in enumerate(zip(row0, row1)):
        sheet[0:h, c * (w + 2):c * (w + 2) + w] = np.clip(top, 0, 1)
        sheet[h + 2:2 * h + 2, c * (w + 2):c * (w + 2) + w] = np.clip(bot, 0, 1)
    worldgen.write_frame_png(sheet, os.path.join(dump_dir, f"{seq_id}.png"))
