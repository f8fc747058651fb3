"""Synthetic falling-blocks world.

Renders short videos of unstable block stacks toppling over a textured
background, keeping exact per-frame masks, boxes and dense flow so that
downstream modules can be evaluated (and the flow oracle fed) without any
hand annotation.

Dataset layout on disk:
    <root>/seq_<k>/frame_<t>.png
    <root>/seq_<k>/flow_<t>_dx.png, flow_<t>_dy.png   (16-bit fixed point)
    <root>/seq_<k>/meta.json
    <root>/manifest.json
Coordinates are pixels, origin top-left, x rightward, y downward.  Boxes
are half-open (x1, y1, x2, y2) with x2 = max on-column + 1.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

FLOW_SCALE = 64  # fixed point: stored = round(flow * 64) + 32768
FLOW_OFFSET = 32768

# support / contact tolerances, px
CONTACT_EPS = 0.5
TOPPLE_ACCEL = 0.08   # rad/step^2 applied while unbalanced
SLIDE_ACCEL = 0.25    # px/step^2 lateral push while unbalanced
REACTION_ACCEL = 0.6  # px/step^2 opposite push on the toppler's support
TIP_ANGLE = 0.35      # rad beyond which a block slides off its support
GROUND_DAMPING = 0.5


class InvalidConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    image_size: int = 64
    n_blocks: int = 3
    seq_len: int = 6          # stored frames per sequence
    frame_stride: int = 2     # physics steps per stored frame
    burn_in_steps: int = 8    # physics steps simulated before the first frame
    gravity: float = 0.3      # px/step^2
    n_sequences: int = 10
    split: tuple = (0.8, 0.1, 0.1)

    def validate(self):
        if not (2 <= self.n_blocks <= 5):
            raise InvalidConfigError(f"n_blocks must be in [2, 5], got {self.n_blocks}")
        if self.image_size < 32:
            raise InvalidConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.seq_len < 2:
            raise InvalidConfigError("seq_len must be >= 2")
        if self.frame_stride < 1:
            raise InvalidConfigError("frame_stride must be >= 1")
        if self.burn_in_steps < 0:
            raise InvalidConfigError("burn_in_steps must be >= 0")


@dataclass
class Block:
    center: np.ndarray        # (x, y) px
    half_extents: np.ndarray  # (w, h) px
    color: np.ndarray         # RGB in [0, 1]
    velocity: np.ndarray      # (vx, vy) px/step
    angle: float = 0.0
    angular_velocity: float = 0.0

    def copy(self):
        return Block(self.center.copy(), self.half_extents.copy(), self.color.copy(),
                     self.velocity.copy(), self.angle, self.angular_velocity)


@dataclass
class SceneSpec:
    blocks: list
    gravity: float
    image_size: int
    step_index: int = 0
    rng_seed: int = 0

    def copy(self):
        return SceneSpec([b.copy() for b in self.blocks], self.gravity,
                         self.image_size, self.step_index, self.rng_seed)


@dataclass
class GroundTruth:
    masks: np.ndarray   # (n, H, W) bool, occlusion-resolved
    boxes: np.ndarray   # (n, 4) float, half-open; zeros for fully hidden blocks
    flow: np.ndarray    # (H, W, 2) float px displacement to next stored frame


def ground_level(image_size):
    return image_size - 2.0


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _sample_colors(rng, n):
    """Colors pairwise separated by >= 0.2 in at least one channel."""
    colors = []
    while len(colors) < n:
        c = rng.uniform(0.1, 1.0, size=3)
        if all(np.max(np.abs(c - prev)) >= 0.2 for prev in colors):
            colors.append(c)
    return colors


def generate_scene(seed, config=None):
    """Deterministically build an unstable vertical stack of blocks."""
    config = config or WorldConfig()
    config.validate()
    rng = np.random.default_rng([int(seed), 0xB10C])
    size = config.image_size
    n = config.n_blocks

    half_w = rng.uniform(5.0, 8.0, size=n)
    half_h = rng.uniform(4.0, 6.0, size=n)
    if 2 * np.sum(half_h) > size - 12:
        raise InvalidConfigError("stack does not fit in frame")

    colors = _sample_colors(rng, n)
    base_x = rng.uniform(size * 0.35, size * 0.65)
    # the lowest joint is the unstable one so the collapse cascades through
    # the whole stack: the toppler pushes its support, the blocks above lose
    # theirs, and every block ends up moving at some point in the sequence
    unstable_joint = 1

    blocks = []
    y = ground_level(size)
    cx = base_x
    for i in range(n):
        if i == unstable_joint:
            support_w = half_w[i - 1]
            off = support_w * rng.uniform(1.05, 1.25) * (1 if rng.random() < 0.5 else -1)
        elif i > 0:
            off = rng.uniform(-1.5, 1.5)
        else:
            off = 0.0
        cx = np.clip(cx + off, half_w[i] + 1, size - half_w[i] - 1)
        cy = y - half_h[i]
        blocks.append(Block(
            center=np.array([cx, cy], dtype=np.float64),
            half_extents=np.array([half_w[i], half_h[i]], dtype=np.float64),
            color=np.asarray(colors[i], dtype=np.float64),
            velocity=np.zeros(2),
        ))
        y = cy - half_h[i]

    return SceneSpec(blocks=blocks, gravity=config.gravity,
                     image_size=size, rng_seed=int(seed))


# ---------------------------------------------------------------------------
# Physics
# ---------------------------------------------------------------------------

def _vertical_extent(block):
    """Half-height of the rotated block's axis-aligned bound."""
    w, h = block.half_extents
    return h * abs(math.cos(block.angle)) + w * abs(math.sin(block.angle))


def _horizontal_extent(block):
    w, h = block.half_extents
    return w * abs(math.cos(block.angle)) + h * abs(math.sin(block.angle))


def _find_support(i, blocks, image_size):
    """Return ('ground', None), ('block', j) or (None, None) for block i."""
    b = blocks[i]
    bottom = b.center[1] + _vertical_extent(b)
    if bottom >= ground_level(image_size) - CONTACT_EPS:
        return "ground", None
    best = None
    for j, other in enumerate(blocks):
        if j == i:
            continue
        top = other.center[1] - _vertical_extent(other)
        if abs(bottom - top) <= CONTACT_EPS:
            overlap = (_horizontal_extent(b) + _horizontal_extent(other)
                       - abs(b.center[0] - other.center[0]))
            if overlap > 0:
                best = j
    if best is not None:
        return "block", best
    return None, None


def is_toppling(block, support):
    """Center of mass outside the support's horizontal extent."""
    off = block.center[0] - support.center[0]
    return abs(off) > _horizontal_extent(support)


def simulate_step(scene):
    """One explicit-Euler physics step (velocity update, then position)."""
    out = scene.copy()
    size = scene.image_size
    supports = [_find_support(i, scene.blocks, size) for i in range(len(scene.blocks))]
    for i, b in enumerate(out.blocks):
        kind, j = supports[i]
        resting = kind is not None and abs(b.angle) < TIP_ANGLE
        if resting and kind == "block" and is_toppling(b, scene.blocks[j]):
            sign = 1.0 if b.center[0] >= scene.blocks[j].center[0] else -1.0
            b.angular_velocity += TOPPLE_ACCEL * sign
            b.velocity[0] += SLIDE_ACCEL * sign
            b.velocity[1] = 0.0
            # the unbalanced block pushes its support the other way
            out.blocks[j].velocity[0] -= REACTION_ACCEL * sign
        elif resting:
            b.velocity[1] = 0.0
            if kind == "ground":
                b.velocity[0] *= GROUND_DAMPING
                b.angular_velocity *= GROUND_DAMPING
        else:
            b.velocity[1] += scene.gravity

    for b in out.blocks:
        b.center += b.velocity
        b.angle += b.angular_velocity

        # contact projection onto the ground, then frame clamping
        bottom = b.center[1] + _vertical_extent(b)
        if bottom > ground_level(size):
            b.center[1] -= bottom - ground_level(size)
            b.velocity[1] = 0.0
        b.center[0] = np.clip(b.center[0], 0.0, size)
        b.center[1] = np.clip(b.center[1], 0.0, size)
    out.step_index += 1
    return out


def advance(scene, n_steps):
    for _ in range(n_steps):
        scene = simulate_step(scene)
    return scene


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def background_texture(image_size):
    """Fixed checkerboard-plus-noise texture, identical for every scene."""
    rng = np.random.default_rng(0xBA5E)
    y, x = np.mgrid[0:image_size, 0:image_size]
    checker = (((x // 8) + (y // 8)) % 2).astype(np.float64)
    base = 0.25 + 0.2 * checker
    tex = base[..., None] + rng.uniform(-0.05, 0.05, size=(image_size, image_size, 3))
    return np.clip(tex, 0.0, 1.0)


def _block_body_coords(block, image_size):
    """Per-pixel body-frame coordinates of pixel centers for one block."""
    size = image_size
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5 - block.center[0]
    py = ys + 0.5 - block.center[1]
    c, s = math.cos(block.angle), math.sin(block.angle)
    bx = c * px + s * py
    by = -s * px + c * py
    return bx, by


def _raster_mask(block, image_size):
    bx, by = _block_body_coords(block, image_size)
    w, h = block.half_extents
    return (np.abs(bx) <= w) & (np.abs(by) <= h)


def mask_to_box(mask):
    """Tight half-open box of a binary mask; zeros if the mask is empty."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return np.zeros(4)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def render(scene, frame_stride=1):
    """Rasterize the scene; flow points at the state frame_stride steps ahead."""
    size = scene.image_size
    frame = background_texture(size).copy()
    raw_masks = [_raster_mask(b, size) for b in scene.blocks]

    # later-listed blocks are in front
    occluder = np.zeros((size, size), dtype=bool)
    vis_masks = []
    for m in reversed(raw_masks):
        vis_masks.append(m & ~occluder)
        occluder |= m
    vis_masks = vis_masks[::-1]

    for b, m in zip(scene.blocks, vis_masks):
        frame[m] = b.color

    nxt = advance(scene.copy(), frame_stride)
    flow = np.zeros((size, size, 2))
    for b, b2, m in zip(scene.blocks, nxt.blocks, vis_masks):
        if not m.any():
            continue
        bx, by = _block_body_coords(b, size)
        c, s = math.cos(b2.angle), math.sin(b2.angle)
        new_x = b2.center[0] + c * bx - s * by
        new_y = b2.center[1] + s * bx + c * by
        ys, xs = np.nonzero(m)
        flow[ys, xs, 0] = new_x[ys, xs] - (xs + 0.5)
        flow[ys, xs, 1] = new_y[ys, xs] - (ys + 0.5)

    masks = np.stack(vis_masks) if vis_masks else np.zeros((0, size, size), bool)
    boxes = np.stack([mask_to_box(m) for m in vis_masks]) if vis_masks else np.zeros((0, 4))
    return frame.astype(np.float32), GroundTruth(masks=masks, boxes=boxes, flow=flow)


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def rle_encode(mask):
    """COCO-style uncompressed RLE: column-major counts, zeros first."""
    flat = np.asarray(mask, dtype=np.uint8).flatten(order="F")
    counts = []
    pos = 0
    val = 0
    for v, run in _runs(flat):
        if v != val:
            counts.append(0)
            val = v
        counts.append(int(run))
        val = 1 - val
        pos += run
    if not counts:
        counts = [int(flat.size)]
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def _runs(flat):
    if flat.size == 0:
        return
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    for s, e in zip(starts, ends):
        yield int(flat[s]), e - s


def rle_decode(rle):
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for run in rle["counts"]:
        flat[pos:pos + run] = val
        pos += run
        val = not val
    return flat.reshape((h, w), order="F")


def write_flow_png(flow_1ch, path):
    fixed = np.round(flow_1ch * FLOW_SCALE).astype(np.int64) + FLOW_OFFSET
    if fixed.min() < 0 or fixed.max() > 65535:
        raise ValueError("flow magnitude exceeds fixed-point range")
    Image.fromarray(fixed.astype(np.uint16)).save(path)


def read_flow_png(path):
    arr = np.asarray(Image.open(path), dtype=np.int64)
    return (arr - FLOW_OFFSET).astype(np.float64) / FLOW_SCALE


def write_frame_png(frame, path):
    Image.fromarray(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)).save(path)


def read_frame_png(path):
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# Dataset generation / loading
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: str
    sequences: list  # [{"id", "path", "split", "n_frames"}]
    config: dict
    seed: int

    def ids(self, split=None):
        return [s["id"] for s in self.sequences if split is None or s["split"] == split]


def _split_assignment(n, ratios):
    n_train = round(n * ratios[0])
    n_val = round(n * ratios[1])
    out = []
    for i in range(n):
        if i < n_train:
            out.append("train")
        elif i < n_train + n_val:
            out.append("val")
        else:
            out.append("test")
    return out


def simulate_sequence(seed, seq_index, config):
    """All stored frames + ground truth for one sequence.

    Recording starts burn_in_steps into the collapse: in the very first
    steps the whole stack moves as one touching lump, so the thresholded
    flow of different blocks merges into a single component; a short
    burn-in lets the movers separate before any frame is stored.
    """
    scene = generate_scene_for_sequence(seed, seq_index, config)
    scene = advance(scene, config.burn_in_steps)
    frames, gts = [], []
    for _ in range(config.seq_len):
        frame, gt = render(scene, frame_stride=config.frame_stride)
        frames.append(frame)
        gts.append(gt)
        scene = advance(scene, config.frame_stride)
    return frames, gts


def generate_scene_for_sequence(seed, seq_index, config):
    # per-sequence RNG stream: mix the dataset seed with the sequence index
    child = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(seq_index),))
    sub_seed = int(child.generate_state(1)[0])
    return generate_scene(sub_seed, config)


def generate_dataset(config, out_dir, seed=0):
    """Write N sequences of T frames plus metadata; returns the manifest."""
    config.validate()
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write_probe")
        with open(probe, "w") as f:
            f.write("ok")
        os.remove(probe)
    except OSError as e:
        raise OSError(f"output directory not writable: {out_dir}: {e}") from e

    splits = _split_assignment(config.n_sequences, config.split)
    sequences = []
    for k in range(config.n_sequences):
        seq_id = f"seq_{k}"
        seq_dir = os.path.join(out_dir, seq_id)
        os.makedirs(seq_dir, exist_ok=True)
        frames, gts = simulate_sequence(seed, k, config)

        flow_files = []
        for t, frame in enumerate(frames):
            write_frame_png(frame, os.path.join(seq_dir, f"frame_{t}.png"))
        for t in range(len(frames) - 1):
            fx, fy = f"flow_{t}_dx.png", f"flow_{t}_dy.png"
            write_flow_png(gts[t].flow[..., 0], os.path.join(seq_dir, fx))
            write_flow_png(gts[t].flow[..., 1], os.path.join(seq_dir, fy))
            flow_files.append([fx, fy])

        meta = {
            "boxes": [[list(map(float, b)) for b in gt.boxes] for gt in gts],
            "masks_rle": [[rle_encode(m) for m in gt.masks] for gt in gts],
            "flow_files": flow_files,
            "block_motion": [
                [float(np.linalg.norm(gt.flow[m], axis=-1).max()) if m.any() else 0.0
                 for m in gt.masks]
                for gt in gts
            ],
        }
        with open(os.path.join(seq_dir, "meta.json"), "w") as f:
            json.dump(meta, f)
        sequences.append({"id": seq_id, "path": seq_id, "split": splits[k],
                          "n_frames": len(frames)})

    manifest = DatasetManifest(root=str(out_dir), sequences=sequences,
                               config=dataclasses.asdict(config), seed=int(seed))
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump({"sequences": manifest.sequences, "config": manifest.config,
                   "seed": manifest.seed}, f, indent=1)
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))
    return manifest


def load_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read manifest: {path}: {e}") from e
    return DatasetManifest(root=str(root), sequences=data["sequences"],
                           config=data["config"], seed=data["seed"])


@dataclass
class LoadedSequence:
    seq_id: str
    frames: list       # float32 (H, W, 3) arrays
    boxes: list        # per frame (n, 4) arrays
    masks: list        # per frame (n, H, W) bool arrays
    flows: list        # per pair (H, W, 2) arrays, len = n_frames - 1
    block_motion: list


def load_sequence(manifest, seq_id):
    entry = next(s for s in manifest.sequences if s["id"] == seq_id)
    seq_dir = os.path.join(manifest.root, entry["path"])
    with open(os.path.join(seq_dir, "meta.json")) as f:
        meta = json.load(f)
    frames = [read_frame_png(os.path.join(seq_dir, f"frame_{t}.png"))
              for t in range(entry["n_frames"])]
    flows = []
    for fx, fy in meta["flow_files"]:
        dx = read_flow_png(os.path.join(seq_dir, fx))
        dy = read_flow_png(os.path.join(seq_dir, fy))
        flows.append(np.stack([dx, dy], axis=-1))
    boxes = [np.array(b, dtype=np.float64).reshape(-1, 4) for b in meta["boxes"]]
    masks = [np.stack([rle_decode(r) for r in per_frame])
             if per_frame else np.zeros((0,) + frames[0].shape[:2], bool)
             for per_frame in meta["masks_rle"]]
    return LoadedSequence(seq_id=seq_id, frames=frames, boxes=boxes, masks=masks,
                          flows=flows, block_motion=meta["block_motion"])
