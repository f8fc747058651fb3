"""Pseudo ground-truth instance annotations from optical flow.

Pixels whose flow magnitude exceeds 1% of the image dimension are grouped
into 8-connected components; the rasterized convex hull of each surviving
component becomes a single-class instance mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import worldgen

DEFAULT_FRACTION = 0.01
DEFAULT_MIN_AREA = 8

EIGHT_CONN = np.ones((3, 3), dtype=int)


class ShapeError(ValueError):
    pass


class EmptyComponentError(ValueError):
    pass


@dataclass
class Instance:
    mask: np.ndarray          # (H, W) bool
    box: np.ndarray           # (x1, y1, x2, y2) half-open px
    class_id: int = 0


@dataclass
class AnnotationRecord:
    frame_id: str
    instances: list


# ---------------------------------------------------------------------------
# Flow sources
# ---------------------------------------------------------------------------

class FlowSource:
    """Provides flow for a frame pair; oracle or pluggable estimator."""

    def flow(self, frame_t, frame_t1):
        raise NotImplementedError


class OracleFlowSource(FlowSource):
    """Returns the stored ground-truth flow for its frame pair bit-exactly."""

    def __init__(self, flow_field):
        self._flow = np.asarray(flow_field, dtype=np.float64)

    def flow(self, frame_t, frame_t1):
        return self._flow


class CallableFlowSource(FlowSource):
    def __init__(self, fn):
        self._fn = fn

    def flow(self, frame_t, frame_t1):
        return np.asarray(self._fn(frame_t, frame_t1), dtype=np.float64)


def provide_flow(frame_t, frame_t1, source):
    if frame_t.shape != frame_t1.shape:
        raise ShapeError(f"frame shapes differ: {frame_t.shape} vs {frame_t1.shape}")
    flow = source.flow(frame_t, frame_t1)
    if flow.shape[:2] != frame_t.shape[:2] or flow.shape[-1] != 2:
        raise ShapeError(f"flow shape {flow.shape} does not match frames {frame_t.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    return flow


# ---------------------------------------------------------------------------
# Flow -> instances
# ---------------------------------------------------------------------------

def threshold_flow(flow, fraction=DEFAULT_FRACTION):
    """On iff euclidean flow magnitude > fraction * max(H, W)."""
    if fraction <= 0:
        raise ValueError("fraction must be positive")
    h, w = flow.shape[:2]
    mag = np.hypot(flow[..., 0], flow[..., 1])
    return mag > fraction * max(h, w)


def connected_components(mask, min_area=DEFAULT_MIN_AREA):
    """8-connected components of on-pixels, as (y, x) index arrays."""
    labels, n = ndimage.label(mask, structure=EIGHT_CONN)
    comps = []
    for lab in range(1, n + 1):
        ys, xs = np.nonzero(labels == lab)
        if len(ys) >= min_area:
            comps.append(np.stack([ys, xs], axis=1))
    return comps


def _hull(points):
    """Monotone-chain convex hull on integer (x, y) points, CCW."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def convex_hull_mask(component, h, w):
    """Rasterized filled convex hull of a component's pixel centers."""
    component = np.asarray(component)
    if component.size == 0:
        raise EmptyComponentError("component has no pixels")
    pts = [(int(x), int(y)) for y, x in component]
    hull = _hull(pts)

    ys, xs = np.mgrid[0:h, 0:w]
    if len(hull) <= 2:
        # degenerate hull: the exact integer points on the segment
        (x0, y0), (x1, y1) = hull[0], hull[-1]
        on_line = (xs - x0) * (y1 - y0) == (ys - y0) * (x1 - x0)
        in_box = ((xs >= min(x0, x1)) & (xs <= max(x0, x1)) &
                  (ys >= min(y0, y1)) & (ys <= max(y0, y1)))
        return on_line & in_box

    mask = np.ones((h, w), dtype=bool)
    for (ax, ay), (bx, by) in zip(hull, hull[1:] + hull[:1]):
        # hull winds clockwise on screen (y down): interior where cross >= 0
        mask &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= 0
    return mask


def annotate_pair(frame_t, frame_t1, source, frame_id="",
                  fraction=DEFAULT_FRACTION, min_area=DEFAULT_MIN_AREA):
    """Full flow -> threshold -> components -> hulls pipeline for one pair."""
    flow = provide_flow(frame_t, frame_t1, source)
    moving = threshold_flow(flow, fraction)
    h, w = moving.shape
    instances = []
    for comp in connected_components(moving, min_area):
        mask = convex_hull_mask(comp, h, w)
        instances.append(Instance(mask=mask, box=worldgen.mask_to_box(mask)))
    return AnnotationRecord(frame_id=frame_id, instances=instances)


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

def records_to_coco(records, image_size):
    """COCO-style dict (single category, RLE segmentation, xywh boxes)."""
    images, annotations = [], []
    ann_id = 1
    for img_id, rec in enumerate(records, start=1):
        images.append({"id": img_id, "file_name": rec.frame_id,
                       "height": image_size, "width": image_size})
        for inst in rec.instances:
            x1, y1, x2, y2 = inst.box
            annotations.append({
                "id": ann_id,
                "image_id": img_id,
                "category_id": 1,
                "segmentation": worldgen.rle_encode(inst.mask),
                "bbox": [float(x1), float(y1), float(x2 - x1), float(y2 - y1)],
                "area": int(inst.mask.sum()),
                "iscrowd": 0,
            })
            ann_id += 1
    return {"images": images, "annotations": annotations,
            "categories": [{"id": 1, "name": "object"}]}


def records_to_native(records):
    return [
        {"frame_id": rec.frame_id,
         "instances": [{"mask_rle": worldgen.rle_encode(i.mask),
                        "box": [float(v) for v in i.box],
                        "class_id": i.class_id}
                       for i in rec.instances]}
        for rec in records
    ]


def records_from_native(data):
    records = []
    for rec in data:
        instances = [Instance(mask=worldgen.rle_decode(i["mask_rle"]),
                              box=np.array(i["box"]),
                              class_id=i["class_id"])
                     for i in rec["instances"]]
        records.append(AnnotationRecord(frame_id=rec["frame_id"], instances=instances))
    return records


def annotate_dataset(manifest, out_path, split="train",
                     fraction=DEFAULT_FRACTION, min_area=DEFAULT_MIN_AREA):
    """Annotate consecutive-frame pairs of one split using the oracle flow."""
    records = []
    for seq_id in manifest.ids(split):
        seq = worldgen.load_sequence(manifest, seq_id)
        for t in range(len(seq.frames) - 1):
            source = OracleFlowSource(seq.flows[t])
            rec = annotate_pair(seq.frames[t], seq.frames[t + 1], source,
                                frame_id=f"{seq_id}/frame_{t}",
                                fraction=fraction, min_area=min_area)
            records.append(rec)
    image_size = manifest.config["image_size"]
    payload = {"native": records_to_native(records),
               "coco": records_to_coco(records, image_size)}
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(payload, f)
    return records


def load_annotations(path):
    with open(path) as f:
        payload = json.load(f)
    return records_from_native(payload["native"])
