"""Differentiable image generation from predicted entities.

Decoded object patches are pasted into image coordinates, background
pixels are copied from the previous frame, newly exposed regions are
inpainted by a small stacked-hourglass net, and a residual refiner cleans
up seams.  All intermediates are kept for losses and debug dumps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmenter import InvalidBoxError


@dataclass
class CompositeSet:
    I_obj: torch.Tensor
    I_back: torch.Tensor
    I_synth: torch.Tensor
    I_un: torch.Tensor
    I_final: torch.Tensor
    M_back: torch.Tensor
    M_synth: torch.Tensor
    M_dyn: list        # per-entity (H, W)
    M_seg_prev: list   # per-entity (H, W)


# ---------------------------------------------------------------------------
# Paste
# ---------------------------------------------------------------------------

def gamma_paste(patch, box, h, w):
    """Resize a (…, 14, 14) patch to the box extent on an all-zero canvas.

    Bilinear in the patch grid (border-clamped sample coordinates), hard
    zero outside the box; differentiable in the patch values.
    """
    if isinstance(box, torch.Tensor):
        box = box.detach()
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise InvalidBoxError(f"box has non-positive area: {(x1, y1, x2, y2)}")
    single = patch.dim() == 2
    if single:
        patch = patch[None]
    c, ph, pw = patch.shape

    xs = torch.arange(w, dtype=patch.dtype) + 0.5
    ys = torch.arange(h, dtype=patch.dtype) + 0.5
    u = ((xs - x1) / (x2 - x1) * pw - 0.5).clamp(0, pw - 1)
    v = ((ys - y1) / (y2 - y1) * ph - 0.5).clamp(0, ph - 1)
    gu = u[None, :].expand(h, w)
    gv = v[:, None].expand(h, w)

    u0 = torch.floor(gu).clamp(max=pw - 2)
    v0 = torch.floor(gv).clamp(max=ph - 2)
    du = gu - u0
    dv = gv - v0
    u0l, v0l = u0.long(), v0.long()

    def g(vv, uu):
        return patch[:, vv.reshape(-1), uu.reshape(-1)].reshape(c, h, w)

    out = (g(v0l, u0l) * ((1 - dv) * (1 - du))[None]
           + g(v0l, u0l + 1) * ((1 - dv) * du)[None]
           + g(v0l + 1, u0l) * (dv * (1 - du))[None]
           + g(v0l + 1, u0l + 1) * (dv * du)[None])
    inside = ((xs[None, :] >= x1) & (xs[None, :] < x2)
              & (ys[:, None] >= y1) & (ys[:, None] < y2)).to(patch.dtype)
    out = out * inside[None]
    return out[0] if single else out


def crop_resize(canvas, box, out_size=14):
    """Inverse of gamma_paste's geometry: sample a canvas back to a patch."""
    from .segmenter import roi_pool
    single = canvas.dim() == 2
    if single:
        canvas = canvas[None]
    b = box if isinstance(box, torch.Tensor) else torch.tensor(box, dtype=canvas.dtype)
    out = roi_pool(canvas, b - 0.5, out_size)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class PatchDecoder(nn.Module):
    """3-layer conv net decoding a (features, mask) patch to RGB pixels."""

    def __init__(self, channels=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels + 1, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )

    def forward(self, features, mask):
        x = torch.cat([features, mask[None]], dim=0)
        return torch.sigmoid(self.net(x[None])[0])


class Hourglass(nn.Module):
    """One encoder-decoder with skip connections, 2 down/up levels."""

    def __init__(self, in_ch, base=16):
        super().__init__()
        self.enc1 = nn.Sequential(nn.Conv2d(in_ch, base, 3, stride=2, padding=1), nn.ReLU())
        self.enc2 = nn.Sequential(nn.Conv2d(base, base * 2, 3, stride=2, padding=1), nn.ReLU())
        self.mid = nn.Sequential(nn.Conv2d(base * 2, base * 2, 3, padding=1), nn.ReLU())
        self.dec2 = nn.Sequential(nn.Conv2d(base * 2, base, 3, padding=1), nn.ReLU())
        self.dec1 = nn.Sequential(nn.Conv2d(base, in_ch, 3, padding=1), nn.ReLU())

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        m = self.mid(e2)
        d2 = self.dec2(F.interpolate(m, scale_factor=2, mode="nearest")) + e1
        d1 = self.dec1(F.interpolate(d2, scale_factor=2, mode="nearest"))
        return d1 + x


class SynthNet(nn.Module):
    """2-stack hourglass inpainter: (I_obj, I_back) -> RGB in [0, 1]."""

    def __init__(self, base=16):
        super().__init__()
        self.stem = nn.Conv2d(6, base, 3, padding=1)
        self.hg1 = Hourglass(base, base)
        self.hg2 = Hourglass(base, base)
        self.out = nn.Conv2d(base, 3, 1)

    def forward(self, i_obj, i_back):
        x = torch.cat([i_obj, i_back], dim=0)[None]
        h = F.relu(self.stem(x))
        h = self.hg2(self.hg1(h))
        return torch.sigmoid(self.out(h)[0])


class Refiner(nn.Module):
    """Residual 3-layer conv net; identity at init (zeroed last layer)."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, i_un):
        return torch.clamp(i_un + self.net(i_un[None])[0], 0.0, 1.0)


class Generator(nn.Module):
    def __init__(self, channels=32, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch_decoder = PatchDecoder(channels)
        self.synth_net = SynthNet()
        self.refiner = Refiner()

    # -- compositing steps ---------------------------------------------------

    def decode_patch(self, features, mask):
        return self.patch_decoder(features, mask)

    def compose_objects(self, entities, h, w):
        i_obj = torch.zeros(3, h, w)
        m_dyn = []
        for e in entities:
            pixels = self.decode_patch(e.features, e.mask)
            i_obj = i_obj + gamma_paste(e.mask[None] * pixels, e.box, h, w)
            m_dyn.append(gamma_paste(e.mask, e.box, h, w))
        return i_obj, m_dyn

    def generate(self, i_prev, seg_entities, dyn_entities):
        """Full composition chain; i_prev is a (3, H, W) tensor in [0, 1]."""
        h, w = i_prev.shape[-2:]
        i_obj, m_dyn = self.compose_objects(dyn_entities, h, w)
        m_seg_prev = [gamma_paste(e.mask, e.box, h, w) for e in seg_entities]
        m_back = background_mask(m_seg_prev, m_dyn, shape=(h, w))
        i_back = background_pixels(m_back, i_prev)
        m_synth = synthetic_mask(m_back, m_dyn)
        i_synth = self.synth_pixels(i_obj, i_back, m_synth)
        i_un = compose_unrefined(i_back, i_obj, i_synth)
        i_final = self.refine(i_un)
        return CompositeSet(I_obj=i_obj, I_back=i_back, I_synth=i_synth,
                            I_un=i_un, I_final=i_final, M_back=m_back,
                            M_synth=m_synth, M_dyn=m_dyn, M_seg_prev=m_seg_prev)

    def synth_pixels(self, i_obj, i_back, m_synth):
        return m_synth[None] * self.synth_net(i_obj, i_back)

    def refine(self, i_un):
        return self.refiner(i_un)


# ---------------------------------------------------------------------------
# Mask algebra (pure functions)
# ---------------------------------------------------------------------------

def background_mask(m_seg_prev, m_dyn, shape=None):
    """1 minus all current and previous object masks, clamped to [0, 1]."""
    if m_seg_prev:
        total = torch.zeros_like(m_seg_prev[0])
    elif m_dyn:
        total = torch.zeros_like(m_dyn[0])
    elif shape is not None:
        total = torch.zeros(shape)
    else:
        raise ValueError("no masks given and no shape to fall back on")
    for m in m_seg_prev:
        total = total + m
    for m in m_dyn:
        total = total + m
    return torch.clamp(1.0 - total, 0.0, 1.0)


def background_pixels(m_back, i_prev):
    return m_back[None] * i_prev


def synthetic_mask(m_back, m_dyn):
    total = m_back.clone()
    for m in m_dyn:
        total = total + m
    return torch.clamp(1.0 - total, 0.0, 1.0)


def compose_unrefined(i_back, i_obj, i_synth):
    return torch.clamp(i_back + i_obj + i_synth, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Debug dump
# ---------------------------------------------------------------------------

def dump_composites(comp, path):
    """Tile all intermediates and masks into one PNG."""
    from PIL import Image

    def to_img(t):
        arr = t.detach().numpy()
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=0)
        return np.clip(arr.transpose(1, 2, 0), 0, 1)

    tiles = [comp.I_obj, comp.I_back, comp.I_synth, comp.I_un, comp.I_final,
             comp.M_back, comp.M_synth] + comp.M_dyn + comp.M_seg_prev
    imgs = [to_img(t) for t in tiles]
    h, w = imgs[0].shape[:2]
    cols = 5
    rows = (len(imgs) + cols - 1) // cols
    sheet = np.zeros((rows * (h + 2), cols * (w + 2), 3), dtype=np.float32)
    for k, img in enumerate(imgs):
        r, c = divmod(k, cols)
        sheet[r * (h + 2):r * (h + 2) + h, c * (w + 2):c * (w + 2) + w] = img
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray((sheet * 255).astype(np.uint8)).save(path)
