"""Lightweight trainable instance segmenter.

Exposes the detector interface consumed downstream: per detection a
bounding box, a C x 14 x 14 RoI feature patch and a 14 x 14 foreground
probability mask.  Architecture is a small conv backbone + anchor-based
region proposals + per-RoI box/score/mask heads, trained purely on the
flow-derived pseudo labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class InvalidBoxError(ValueError):
    pass


class MissingDataError(RuntimeError):
    pass


@dataclass
class SegConfig:
    image_size: int = 64
    channels: int = 32
    stride: int = 4
    patch_size: int = 14
    anchor_sizes: tuple = (8, 16, 28)
    n_proposals: int = 16
    nms_iou: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    sample_size: int = 16  # negatives sampled per loss term


@dataclass
class Detection:
    box: torch.Tensor       # (4,) px, x1 < x2, y1 < y2
    score: torch.Tensor     # scalar in [0, 1]
    features: torch.Tensor  # (C, 14, 14)
    mask: torch.Tensor      # (14, 14) in [0, 1]

    def detached(self):
        return Detection(box=self.box.detach(), score=self.score.detach(),
                         features=self.features.detach(), mask=self.mask.detach())


@dataclass
class SegLossBundle:
    l_cls: torch.Tensor
    l_box: torch.Tensor
    l_mask: torch.Tensor
    l_obj: torch.Tensor
    l_reg: torch.Tensor

    @property
    def total(self):
        return self.l_cls + self.l_box + self.l_mask + self.l_obj + self.l_reg

    def detach_floats(self):
        return {k: float(getattr(self, k)) for k in
                ("l_cls", "l_box", "l_mask", "l_obj", "l_reg")} | {"total": float(self.total)}


# ---------------------------------------------------------------------------
# Box utilities
# ---------------------------------------------------------------------------

def box_iou(a, b):
    """IoU matrix between (N, 4) and (M, 4) boxes."""
    a = a.reshape(-1, 4)
    b = b.reshape(-1, 4)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = ((a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])).clamp(min=0)
    area_b = ((b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])).clamp(min=0)
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def nms(boxes, scores, iou_thresh):
    """Greedy non-maximum suppression; returns kept indices, score-ordered."""
    order = torch.argsort(scores, descending=True)
    keep = []
    while order.numel() > 0:
        i = order[0]
        keep.append(int(i))
        if order.numel() == 1:
            break
        rest = order[1:]
        ious = box_iou(boxes[i], boxes[rest])[0]
        order = rest[ious <= iou_thresh]
    return torch.tensor(keep, dtype=torch.long)


def encode_deltas(boxes, anchors):
    """(dx, dy, dw, dh) of boxes relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2
    ay = (anchors[:, 1] + anchors[:, 3]) / 2
    bw = (boxes[:, 2] - boxes[:, 0]).clamp(min=1e-3)
    bh = (boxes[:, 3] - boxes[:, 1]).clamp(min=1e-3)
    bx = (boxes[:, 0] + boxes[:, 2]) / 2
    by = (boxes[:, 1] + boxes[:, 3]) / 2
    return torch.stack([(bx - ax) / aw, (by - ay) / ah,
                        torch.log(bw / aw), torch.log(bh / ah)], dim=1)


def decode_deltas(deltas, anchors):
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2
    ay = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * torch.exp(deltas[:, 2].clamp(max=4))
    h = ah * torch.exp(deltas[:, 3].clamp(max=4))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)


def clip_boxes(boxes, image_size, min_size=2.0):
    """Clip to image bounds while keeping at least min_size on each side."""
    cx = ((boxes[:, 0] + boxes[:, 2]) / 2).clamp(min_size / 2, image_size - min_size / 2)
    cy = ((boxes[:, 1] + boxes[:, 3]) / 2).clamp(min_size / 2, image_size - min_size / 2)
    w = (boxes[:, 2] - boxes[:, 0]).clamp(min=min_size)
    h = (boxes[:, 3] - boxes[:, 1]).clamp(min=min_size)
    x1 = (cx - w / 2).clamp(min=0)
    y1 = (cy - h / 2).clamp(min=0)
    x2 = (cx + w / 2).clamp(max=image_size)
    y2 = (cy + h / 2).clamp(max=image_size)
    return torch.stack([x1, y1, x2, y2], dim=1)


def smooth_l1(pred, target):
    d = (pred - target).abs()
    return torch.where(d < 1, 0.5 * d * d, d - 0.5).mean()


# ---------------------------------------------------------------------------
# RoI pooling
# ---------------------------------------------------------------------------

def roi_pool(features, box, out_size=14):
    """Bilinear sampling of a (C, H, W) map on an out_size grid inside box.

    Box coordinates live in the feature map's own pixel frame (value at
    index (r, c) sits at x=c, y=r); differentiable in both arguments.
    """
    if features.dim() != 3:
        raise ValueError(f"expected (C, H, W) features, got {tuple(features.shape)}")
    x1, y1, x2, y2 = box[0], box[1], box[2], box[3]
    if float((x2 - x1).detach()) <= 0 or float((y2 - y1).detach()) <= 0:
        raise InvalidBoxError(f"box has non-positive area: {box.tolist()}")
    c, h, w = features.shape
    steps = torch.arange(out_size, dtype=features.dtype, device=features.device) + 0.5
    xs = x1 + steps / out_size * (x2 - x1)   # (out,)
    ys = y1 + steps / out_size * (y2 - y1)
    gx = xs[None, :].expand(out_size, out_size)
    gy = ys[:, None].expand(out_size, out_size)

    x0 = torch.floor(gx).detach()
    y0 = torch.floor(gy).detach()
    wx = gx - x0
    wy = gy - y0

    def gather(yy, xx):
        yi = yy.long().clamp(0, h - 1)
        xi = xx.long().clamp(0, w - 1)
        vals = features[:, yi.reshape(-1), xi.reshape(-1)].reshape(c, out_size, out_size)
        inside = ((yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)).to(features.dtype)
        return vals * inside[None]

    out = (gather(y0, x0) * ((1 - wy) * (1 - wx))[None]
           + gather(y0, x0 + 1) * ((1 - wy) * wx)[None]
           + gather(y0 + 1, x0) * (wy * (1 - wx))[None]
           + gather(y0 + 1, x0 + 1) * (wy * wx)[None])
    return out


def frame_to_tensor(frame):
    """(H, W, 3) float array or (3, H, W) tensor -> (3, H, W) float tensor."""
    if isinstance(frame, torch.Tensor):
        return frame.float()
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).float()


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Backbone(nn.Module):
    """Stride-4 feature extractor whose first 3 channels are a fixed
    average-pooled copy of the RGB input.

    Detection losses train features to be color-invariant, which starves
    every downstream consumer of appearance: RoI-pooled features are the
    only thing the patch decoder sees, and without the passthrough no
    readout of them can recover the object's pixels.
    """

    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, channels, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels - 3, 3, stride=2, padding=1), nn.ReLU(),
        )

    def forward(self, x):
        return torch.cat([F.avg_pool2d(x, 4), self.net(x)], dim=1)


class Segmenter(nn.Module):
    def __init__(self, config=None, seed=0):
        super().__init__()
        self.config = config or SegConfig()
        cfg = self.config
        torch.manual_seed(seed)
        c = cfg.channels
        self.backbone = Backbone(c)
        a = len(cfg.anchor_sizes)
        self.rpn_conv = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU())
        self.rpn_obj = nn.Conv2d(c, a, 1)
        self.rpn_delta = nn.Conv2d(c, 4 * a, 1)

        p = cfg.patch_size
        self.box_head = nn.Sequential(nn.Flatten(), nn.Linear(c * p * p, 64), nn.ReLU())
        self.box_delta = nn.Linear(64, 4)
        self.cls_logit = nn.Linear(64, 1)
        self.mask_head = nn.Sequential(
            nn.Conv2d(c, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 1, 3, padding=1),
        )
        nn.init.zeros_(self.box_delta.weight)
        nn.init.zeros_(self.box_delta.bias)
        self._sampler = torch.Generator().manual_seed(seed + 1)
        self.register_buffer("anchors", self._build_anchors(), persistent=False)

    def _build_anchors(self):
        cfg = self.config
        n = cfg.image_size // cfg.stride
        centers = (torch.arange(n, dtype=torch.float32) + 0.5) * cfg.stride
        cy, cx = torch.meshgrid(centers, centers, indexing="ij")
        boxes = []
        for s in cfg.anchor_sizes:
            half = s / 2
            boxes.append(torch.stack([cx - half, cy - half, cx + half, cy + half],
                                     dim=-1).reshape(-1, 4))
        # layout matches (A, Hf, Wf) head outputs flattened per anchor type
        return torch.cat(boxes, dim=0)

    # -- forward pieces ----------------------------------------------------

    def backbone_features(self, frame):
        x = frame_to_tensor(frame)
        return self.backbone(x[None])[0]

    def _rpn_outputs(self, features):
        a = len(self.config.anchor_sizes)
        h = self.rpn_conv(features[None])
        obj = self.rpn_obj(h)[0].reshape(a, -1).reshape(-1)            # (A*Hf*Wf,)
        deltas = self.rpn_delta(h)[0].reshape(a, 4, -1)
        deltas = deltas.permute(0, 2, 1).reshape(-1, 4)
        return obj, deltas

    def propose_regions(self, features):
        """Top-N anchor proposals after NMS; boxes are detached image coords."""
        cfg = self.config
        with torch.no_grad():
            obj, deltas = self._rpn_outputs(features)
            boxes = clip_boxes(decode_deltas(deltas, self.anchors), cfg.image_size)
            keep = nms(boxes, obj, cfg.nms_iou)
            keep = keep[:cfg.n_proposals]
            if len(keep) < cfg.n_proposals:
                # pad from remaining best-scoring anchors so the budget is fixed
                chosen = set(keep.tolist())
                extra = [int(i) for i in torch.argsort(obj, descending=True)
                         if int(i) not in chosen][:cfg.n_proposals - len(keep)]
                keep = torch.cat([keep, torch.tensor(extra, dtype=torch.long)])
            return boxes[keep], torch.sigmoid(obj[keep])

    def _roi_forward(self, features, box):
        """Head pass for one proposal box (image coords)."""
        cfg = self.config
        roi = roi_pool(features, box / cfg.stride, cfg.patch_size)
        hidden = self.box_head(roi[None])
        deltas = self.box_delta(hidden)[0]
        logit = self.cls_logit(hidden)[0, 0]
        refined = decode_deltas(deltas[None], box[None].detach())[0]
        refined = clip_boxes(refined[None], cfg.image_size)[0]
        final_roi = roi_pool(features, refined.detach() / cfg.stride, cfg.patch_size)
        mask_logits = self.mask_head(final_roi[None])[0, 0]
        return refined, logit, final_roi, mask_logits

    def detect(self, frame, score_threshold=0.5):
        """Detections with score above threshold, best first."""
        features = self.backbone_features(frame)
        proposals, _ = self.propose_regions(features)
        dets = []
        for box in proposals:
            refined, logit, roi, mask_logits = self._roi_forward(features, box)
            score = torch.sigmoid(logit)
            if float(score.detach()) > score_threshold:
                dets.append(Detection(box=refined, score=score, features=roi,
                                      mask=torch.sigmoid(mask_logits)))
        dets.sort(key=lambda d: float(d.score.detach()), reverse=True)
        return dets

    # -- losses -------------------------------------------------------------

    def _match(self, boxes, gt_boxes):
        """Per-box match: (gt index or -1, is_positive, is_negative)."""
        cfg = self.config
        n = boxes.shape[0]
        if gt_boxes.shape[0] == 0:
            idx = torch.full((n,), -1, dtype=torch.long)
            return idx, torch.zeros(n, dtype=torch.bool), torch.ones(n, dtype=torch.bool)
        ious = box_iou(boxes, gt_boxes)
        best, idx = ious.max(dim=1)
        pos = best >= cfg.pos_iou
        neg = best < cfg.neg_iou
        idx = torch.where(pos, idx, torch.full_like(idx, -1))
        return idx, pos, neg

    def _sample_neg(self, neg_mask, k):
        neg_idx = torch.nonzero(neg_mask).reshape(-1)
        if len(neg_idx) <= k:
            return neg_idx
        perm = torch.randperm(len(neg_idx), generator=self._sampler)[:k]
        return neg_idx[perm]

    def seg_loss(self, frame, record):
        """Five-term detection loss against one pseudo-annotation record."""
        cfg = self.config
        features = self.backbone_features(frame)
        gt_boxes = torch.tensor(np.array([i.box for i in record.instances],
                                         dtype=np.float32).reshape(-1, 4))
        gt_masks = [torch.from_numpy(np.asarray(i.mask, dtype=np.float32))
                    for i in record.instances]
        zero = torch.zeros(())

        # RPN: objectness + anchor regression
        obj_logits, rpn_deltas = self._rpn_outputs(features)
        a_idx, a_pos, a_neg = self._match(self.anchors, gt_boxes)
        pos_sel = torch.nonzero(a_pos).reshape(-1)[:cfg.sample_size]
        # 1:3 pos:neg keeps the positive signal from drowning in negatives
        neg_sel = self._sample_neg(a_neg, min(cfg.sample_size,
                                              max(3 * len(pos_sel), 3)))
        sel = torch.cat([pos_sel, neg_sel])
        labels = torch.cat([torch.ones(len(pos_sel)), torch.zeros(len(neg_sel))])
        l_obj = F.binary_cross_entropy_with_logits(obj_logits[sel], labels)
        if len(pos_sel) > 0:
            target = encode_deltas(gt_boxes[a_idx[pos_sel]], self.anchors[pos_sel])
            l_reg = smooth_l1(rpn_deltas[pos_sel], target)
        else:
            l_reg = zero

        # RoI heads on proposals.  Classification negatives come from random
        # anchors, not from the remaining top proposals: with motion-derived
        # labels the unlabeled static objects dominate the high-objectness
        # proposals, and using those as negatives trains the classifier to
        # suppress exactly the objects it should generalize to.
        proposals, _ = self.propose_regions(features)
        p_idx, p_pos, _ = self._match(proposals, gt_boxes)
        pos_list = torch.nonzero(p_pos).reshape(-1)
        neg_list = self._sample_neg(a_neg, min(cfg.sample_size,
                                               max(3 * len(pos_list), 3)))

        cls_logits, cls_labels = [], []
        l_box_terms, l_mask_terms = [], []
        for i in pos_list.tolist():
            refined, logit, _, mask_logits = self._roi_forward(features, proposals[i])
            cls_logits.append(logit)
            cls_labels.append(1.0)
            hidden = self.box_head(
                roi_pool(features, proposals[i] / cfg.stride, cfg.patch_size)[None])
            deltas = self.box_delta(hidden)[0]
            target = encode_deltas(gt_boxes[p_idx[i]][None], proposals[i][None])[0]
            l_box_terms.append(smooth_l1(deltas, target))
            gt_crop = roi_pool(gt_masks[p_idx[i]][None], refined.detach(),
                               cfg.patch_size)[0]
            l_mask_terms.append(F.binary_cross_entropy_with_logits(
                mask_logits, (gt_crop > 0.5).float()))
        for i in neg_list.tolist():
            _, logit, _, _ = self._roi_forward(features, self.anchors[i])
            cls_logits.append(logit)
            cls_labels.append(0.0)

        if cls_logits:
            l_cls = F.binary_cross_entropy_with_logits(
                torch.stack(cls_logits), torch.tensor(cls_labels))
        else:
            l_cls = zero
        l_box = torch.stack(l_box_terms).mean() if l_box_terms else zero
        l_mask = torch.stack(l_mask_terms).mean() if l_mask_terms else zero
        return SegLossBundle(l_cls=l_cls, l_box=l_box, l_mask=l_mask,
                             l_obj=l_obj, l_reg=l_reg)


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

def pretrain(segmenter, frames_and_records, steps, lr=1e-3, seed=0,
             log_every=25, log=None):
    """Gradient-descend total seg loss over (frame, record) pairs.

    frames_and_records: sequence of (frame, AnnotationRecord).  Returns the
    logged loss curve: list of (step, total).
    """
    if not frames_and_records:
        raise MissingDataError("no pseudo annotations available for pre-training")
    opt = torch.optim.Adam(segmenter.parameters(), lr=lr)
    order_rng = np.random.default_rng(seed)
    curve = []
    n = len(frames_and_records)
    order = order_rng.permutation(n)
    for step in range(steps):
        frame, record = frames_and_records[order[step % n]]
        if step % n == n - 1:
            order = order_rng.permutation(n)
        bundle = segmenter.seg_loss(frame, record)
        opt.zero_grad()
        bundle.total.backward()
        opt.step()
        curve.append((step, float(bundle.total.detach())))
        if log is not None and step % log_every == 0:
            log(f"pretrain step {step}: total={float(bundle.total.detach()):.4f}")
    return curve
