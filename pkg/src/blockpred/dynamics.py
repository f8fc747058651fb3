"""Per-entity latent dynamics, entity association, and the consistency loss.

Each entity (box + feature/mask patch) is encoded to a latent vector,
advanced one step by a residual fully-connected network, and decoded back
to a box and patch.  Entities keep stable ids for a whole sequence;
dynamics predictions are matched to fresh detections by centroid
proximity for the consistency loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import linear_sum_assignment

from .segmenter import Detection, box_iou

DEFAULT_LATENT_DIM = 128
ASSOC_DISTANCE_CAP = 20.0
ENTITY_OVERLAP_IOU = 0.5


@dataclass
class Entity:
    id: int
    box: torch.Tensor       # (4,) px
    features: torch.Tensor  # (C, 14, 14)
    mask: torch.Tensor      # (14, 14) in [0, 1]
    origin: str = "segmented"   # or "predicted"


def entity_from_detection(eid, det):
    return Entity(id=eid, box=det.box, features=det.features, mask=det.mask,
                  origin="segmented")


def select_entities(detections, max_entities, overlap_iou=ENTITY_OVERLAP_IOU):
    """Score-ordered greedy pick of non-overlapping detections as entities.

    Detections arrive sorted by score; duplicates of one object would be
    pasted on top of each other and double-paint the composite, so any
    detection overlapping an already kept one beyond overlap_iou is dropped.
    """
    kept = []
    for d in detections:
        box = d.box.detach()
        if any(float(box_iou(box[None], k.box.detach()[None])) > overlap_iou
               for k in kept):
            continue
        kept.append(d)
        if len(kept) == max_entities:
            break
    return [entity_from_detection(i, d) for i, d in enumerate(kept)]


class DynamicsModel(nn.Module):
    """Encode -> 4-layer residual MLP -> decode, applied per entity."""

    def __init__(self, image_size=64, channels=32, patch_size=14,
                 latent_dim=DEFAULT_LATENT_DIM, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.latent_dim = latent_dim
        p2 = patch_size * patch_size
        in_dim = 4 + p2 + channels * p2

        # the first 4 latent dims hold an exact, parameter-free encoding of
        # the box (logit center, atanh log-size); the learned encoder fills
        # the rest.  Keeping box geometry out of the learned codec means
        # feature-matching gradients can never corrupt box decoding, and the
        # box round trip is exact by construction.
        self.encoder = nn.Sequential(
            nn.Linear(in_dim, 256), nn.ReLU(),
            nn.Linear(256, latent_dim - 4),
        )
        self.predictor = nn.Sequential(
            nn.Linear(latent_dim, latent_dim), nn.ReLU(),
            nn.Linear(latent_dim, latent_dim), nn.ReLU(),
            nn.Linear(latent_dim, latent_dim), nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
        )
        nn.init.zeros_(self.predictor[-1].weight)
        nn.init.zeros_(self.predictor[-1].bias)
        self.mask_dec = nn.Linear(latent_dim, p2)
        # feature decoding needs one hidden layer: patch features are
        # roughly a product of appearance and mask shape, which a single
        # linear map from the latent cannot represent
        self.feat_dec = nn.Sequential(
            nn.Linear(latent_dim, 256), nn.ReLU(),
            nn.Linear(256, channels * p2),
        )

    # -- ops -----------------------------------------------------------------

    def box_to_latent(self, box):
        """Invert the box parameterization of decode_latent (clamped so
        degenerate boxes stay finite: centers a fraction of a pixel inside
        the image, sides within the representable size range)."""
        size = self.image_size
        ref = size / 4.0
        eps = 1e-4
        cx = ((box[0] + box[2]) / 2 / size).clamp(eps, 1 - eps)
        cy = ((box[1] + box[3]) / 2 / size).clamp(eps, 1 - eps)
        w = ((box[2] - box[0]) / ref).clamp(math.exp(-2) + eps, math.exp(2) - eps)
        h = ((box[3] - box[1]) / ref).clamp(math.exp(-2) + eps, math.exp(2) - eps)
        return torch.stack([torch.logit(cx), torch.logit(cy),
                            torch.atanh(torch.log(w) / 2.0),
                            torch.atanh(torch.log(h) / 2.0)])

    def encode_entity(self, e):
        box_norm = e.box / self.image_size
        gated = (e.features * e.mask[None]).reshape(-1)
        x = torch.cat([box_norm, e.mask.reshape(-1), gated])
        return torch.cat([self.box_to_latent(e.box), self.encoder(x)])

    def predict_latent(self, z):
        return z + self.predictor(z)

    def decode_latent(self, z):
        """Box via (center, log-size) so x1 < x2 always holds."""
        raw = z[:4]
        size = self.image_size
        ref = size / 4.0
        cx = torch.sigmoid(raw[0]) * size
        cy = torch.sigmoid(raw[1]) * size
        w = ref * torch.exp(2.0 * torch.tanh(raw[2]))
        h = ref * torch.exp(2.0 * torch.tanh(raw[3]))
        box = torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
        p = self.patch_size
        mask = torch.sigmoid(self.mask_dec(z)).reshape(p, p)
        features = self.feat_dec(z).reshape(self.channels, p, p)
        return box, features, mask

    def step(self, entities):
        """Advance every entity one step; ids preserved, origin='predicted'."""
        out = []
        for e in entities:
            z = self.predict_latent(self.encode_entity(e))
            box, features, mask = self.decode_latent(z)
            out.append(Entity(id=e.id, box=box, features=features, mask=mask,
                              origin="predicted"))
        return out


# ---------------------------------------------------------------------------
# Association
# ---------------------------------------------------------------------------

def _centroid(box):
    b = box.detach()
    return ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2)


def associate(entities, detections, cap=ASSOC_DISTANCE_CAP):
    """Optimal one-to-one matching by box centroid distance.

    Maximizes the number of matched pairs under the per-pair distance cap,
    breaking ties by minimum total distance (minimum-cost assignment with
    over-cap pairs penalized out).  Returns entity_id -> detection index
    (or None); unmatched detections are dropped.
    """
    n, m = len(entities), len(detections)
    matching = {e.id: None for e in entities}
    if n == 0 or m == 0:
        return matching
    dist = np.zeros((n, m))
    for i, e in enumerate(entities):
        ex, ey = _centroid(e.box)
        for j, d in enumerate(detections):
            dx, dy = _centroid(d.box)
            dist[i, j] = math.hypot(ex - dx, ey - dy)

    # a penalty far above any feasible total cost makes the assignment
    # maximize the number of under-cap matches first, then minimize distance
    penalty = max(cap, dist[np.isfinite(dist)].max() if np.isfinite(dist).any() else cap)
    penalty = penalty * (n + m + 1) + 1.0
    cost = np.where(dist <= cap, dist, penalty)
    rows, cols = linear_sum_assignment(cost)
    for i, j in zip(rows, cols):
        if dist[i, j] <= cap:
            matching[entities[i].id] = int(j)
    return matching


def matched_detections(entities, detections, matching):
    """Align detections (or None) with the entity list via a matching."""
    return [detections[matching[e.id]] if matching[e.id] is not None else None
            for e in entities]


# ---------------------------------------------------------------------------
# Consistency loss
# ---------------------------------------------------------------------------

def consistency_loss(predicted, matched_segs, image_size=64):
    """Sum over matched pairs of squared errors between masked features
    and between boxes in normalized coordinates; unmatched entities add 0.
    """
    total = torch.zeros(())
    for e, d in zip(predicted, matched_segs):
        if d is None:
            continue
        feat_term = ((e.mask[None] * e.features
                      - d.mask[None] * d.features) ** 2).sum()
        box_term = (((e.box - d.box) / image_size) ** 2).sum()
        total = total + feat_term + box_term
    return total
