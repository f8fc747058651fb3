"""Combined objective and the two-phase training schedule.

Phase 1 pre-trains the segmenter on flow-derived pseudo labels; phase 2
jointly optimizes segmenter, dynamics and generator over multi-step
rollouts.  Rollouts are autoregressive: after the first step the dynamics
model consumes its own predictions and the generator its own frames,
while consistency targets come from running the segmenter on each real
future frame.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import checkpoint as ckpt
from . import worldgen
from .dynamics import (DynamicsModel, Entity, associate, consistency_loss,
                       entity_from_detection, matched_detections,
                       select_entities)
from .generator import Generator, crop_resize
from .segmenter import Segmenter, SegConfig, frame_to_tensor, pretrain


class MissingCheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    rollout_length: int = 3
    lr: float = 1e-3
    phase1_steps: int = 600
    phase2_steps: int = 500
    warmstart_steps: int = 300
    recon_weight: float = 1.0
    codec_lr_scale: float = 0.1
    seed: int = 0
    detect_threshold: float = 0.5
    max_entities: int = 5
    checkpoint_every: int = 100
    image_size: int = 64

    def validate(self):
        if self.rollout_length < 1:
            raise ValueError("rollout_length must be >= 1")
        if min(self.alpha, self.c1, self.c2) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.recon_weight < 0:
            raise ValueError("recon_weight must be non-negative")
        if self.codec_lr_scale < 0:
            raise ValueError("codec_lr_scale must be non-negative")


@dataclass
class LossBundle:
    l_pred_final: torch.Tensor
    l_pred_unrefined: torch.Tensor
    l_pred_masked: torch.Tensor
    l_con: torch.Tensor
    l_seg: torch.Tensor
    alpha: float = 1.0
    c1: float = 1.0
    c2: float = 1.0

    @property
    def l_pred(self):
        return self.l_pred_final + self.l_pred_unrefined + self.alpha * self.l_pred_masked

    @property
    def total(self):
        return self.l_pred + self.c1 * self.l_con + self.c2 * self.l_seg

    def floats(self):
        keys = ("l_pred_final", "l_pred_unrefined", "l_pred_masked", "l_con", "l_seg")
        out = {k: float(getattr(self, k).detach()) for k in keys}
        out.update(alpha=self.alpha, c1=self.c1, c2=self.c2,
                   l_pred=float(self.l_pred.detach()), total=float(self.total.detach()))
        return out


@dataclass
class Models:
    segmenter: Segmenter
    dynamics: DynamicsModel
    generator: Generator

    def parameters(self):
        for m in (self.segmenter, self.dynamics, self.generator):
            yield from m.parameters()

    def state(self):
        return {"segmenter": self.segmenter, "dynamics": self.dynamics,
                "generator": self.generator}


def build_models(image_size=64, seed=0):
    seg_cfg = SegConfig(image_size=image_size)
    seg = Segmenter(seg_cfg, seed=seed)
    dyn = DynamicsModel(image_size=image_size, channels=seg_cfg.channels,
                        patch_size=seg_cfg.patch_size, seed=seed + 1)
    gen = Generator(channels=seg_cfg.channels, seed=seed + 2)
    return Models(segmenter=seg, dynamics=dyn, generator=gen)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def prediction_loss(i_final, i_un, i_target, u_seg, eps=0.0):
    """Per-term mean squared errors; the masked term averages over on-pixels
    only and is 0 for an empty mask."""
    l_final = ((i_final - i_target) ** 2).mean()
    l_un = ((i_un - i_target) ** 2).mean()
    n_on = u_seg.sum()
    if float(n_on) == 0:
        l_masked = torch.zeros(())
    else:
        diff = (u_seg[None] * (i_final - i_target)) ** 2
        l_masked = diff.sum() / (n_on * i_final.shape[0])
    return l_final, l_un, l_masked


def combined_loss(l_pred_final, l_pred_unrefined, l_pred_masked, l_con, l_seg,
                  alpha=1.0, c1=1.0, c2=1.0):
    def t(x):
        return x if isinstance(x, torch.Tensor) else torch.tensor(float(x))
    return LossBundle(l_pred_final=t(l_pred_final), l_pred_unrefined=t(l_pred_unrefined),
                      l_pred_masked=t(l_pred_masked), l_con=t(l_con), l_seg=t(l_seg),
                      alpha=alpha, c1=c1, c2=c2)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

@dataclass
class RolloutResult:
    composites: list
    bundle: LossBundle
    skipped: bool = False
    skip_reason: str = ""
    entities0: list = field(default_factory=list)


def rollout(seq, records_by_frame, models, config):
    """Train-time rollout over one sequence.

    seq: worldgen.LoadedSequence (or anything with .frames / .seq_id).
    records_by_frame: frame_id -> AnnotationRecord for the seg loss.
    """
    L = config.rollout_length
    if len(seq.frames) < L + 1:
        return RolloutResult([], None, skipped=True, skip_reason="sequence too short")
    dets0 = models.segmenter.detect(seq.frames[0], config.detect_threshold)
    if not dets0:
        return RolloutResult([], None, skipped=True,
                             skip_reason="zero detections on frame 0")
    # frame-0 detections enter the rollout as fixed inputs, like the
    # consistency targets: letting the joint loss reach the segmenter
    # through them rewards shrinking masks and scores until detections
    # vanish and the rollout degenerates to a cheap background copy; the
    # segmenter keeps training through its own seg loss
    entities0 = select_entities([d.detached() for d in dets0],
                                config.max_entities)
    entities = entities0
    i_prev = frame_to_tensor(seq.frames[0])
    size = config.image_size

    comps = []
    zero = torch.zeros(())
    l_final = l_un = l_masked = l_con = zero
    for k in range(1, L + 1):
        dyn_entities = models.dynamics.step(entities)
        # future-frame detections act as fixed consistency targets; letting
        # gradient flow into them lets the segmenter collapse masks/features
        # to zero to kill the loss
        dets_k = [d.detached() for d in
                  models.segmenter.detect(seq.frames[k], config.detect_threshold)]
        matching = associate(dyn_entities, dets_k)
        l_con = l_con + consistency_loss(
            dyn_entities, matched_detections(dyn_entities, dets_k, matching), size)
        comp = models.generator.generate(i_prev, entities, dyn_entities)
        u_seg = _predicted_union_mask(comp.M_dyn, size)
        target = frame_to_tensor(seq.frames[k])
        lf, lu, lm = prediction_loss(comp.I_final, comp.I_un, target, u_seg)
        l_final, l_un, l_masked = l_final + lf, l_un + lu, l_masked + lm
        comps.append(comp)
        entities = dyn_entities
        i_prev = comp.I_final

    l_seg = zero
    n_seg = 0
    for t in range(L):
        rec = records_by_frame.get(f"{seq.seq_id}/frame_{t}")
        if rec is not None:
            l_seg = l_seg + models.segmenter.seg_loss(seq.frames[t], rec).total
            n_seg += 1
    if n_seg:
        l_seg = l_seg / n_seg

    bundle = combined_loss(l_final / L, l_un / L, l_masked / L, l_con / L, l_seg,
                           alpha=config.alpha, c1=config.c1, c2=config.c2)
    return RolloutResult(comps, bundle, entities0=entities0)


def _predicted_union_mask(m_dyn, size):
    """Binarized union of the pasted predicted object masks (Eq.-style u_seg)."""
    if not m_dyn:
        return torch.zeros(size, size)
    total = torch.zeros_like(m_dyn[0])
    for m in m_dyn:
        total = total + m
    return (total > 0.5).float().detach()


# ---------------------------------------------------------------------------
# Autoencoding warm start
# ---------------------------------------------------------------------------

def collect_entities(models, manifest, config, split="train"):
    """Detached detections from every frame of a split, paired with the
    frame pixels cropped to the detection box (the patch-decoder target)."""
    samples = []
    with torch.no_grad():
        for seq_id in manifest.ids(split):
            seq = worldgen.load_sequence(manifest, seq_id)
            for frame in seq.frames:
                dets = models.segmenter.detect(frame, config.detect_threshold)
                i_t = frame_to_tensor(frame)
                for d in dets[:config.max_entities]:
                    d = d.detached()
                    samples.append((d, crop_resize(i_t, d.box)))
    return samples


def codec_reconstruction_loss(models, entity, target_patch):
    """Autoencoding terms for one entity: the dynamics codec must reproduce
    the entity's box/mask/features and the patch decoder the frame pixels
    inside its box.  Inputs are treated as fixed targets."""
    dyn, gen = models.dynamics, models.generator
    fixed = Entity(id=entity.id, box=entity.box.detach(),
                   features=entity.features.detach(), mask=entity.mask.detach())
    box, feats, mask = dyn.decode_latent(dyn.encode_entity(fixed))
    loss = (((box - fixed.box) / dyn.image_size) ** 2).sum()
    loss = loss + ((mask - fixed.mask) ** 2).mean()
    loss = loss + ((feats - fixed.features) ** 2).mean()
    pixels = gen.decode_patch(fixed.features, fixed.mask)
    loss = loss + ((pixels - target_patch) ** 2).mean()
    # rollout steps paint decode_patch(decoded features, decoded mask), so
    # the codec and patch decoder must reproduce the pixels through the
    # round trip as well, not just from raw detections
    pixels_rt = gen.decode_patch(feats, mask)
    return loss + ((pixels_rt - target_patch) ** 2).mean()


def reconstruction_box_error(dynamics, samples):
    """Mean per-coordinate |box| error (px) of the encode->decode round trip."""
    if not samples:
        return float("nan")
    errs = []
    with torch.no_grad():
        for d, _ in samples:
            e = entity_from_detection(0, d)
            box, _, _ = dynamics.decode_latent(dynamics.encode_entity(e))
            errs.append(float((box - d.box).abs().mean()))
    return float(np.mean(errs))


def warm_start(models, manifest, config, log=print):
    """Fit the entity codec to reproduce its own inputs before any rollout
    training: encode->decode should reconstruct each detected entity's box,
    mask and features, and the patch decoder should reproduce the frame
    pixels inside the box.  Without this, the freshly initialized decoders
    emit arbitrary boxes/patches and the first rollouts composite garbage.
    Returns the (step, loss) curve and the final box round-trip error in px.
    """
    samples = collect_entities(models, manifest, config)
    if not samples:
        return [], float("nan")
    dyn, gen = models.dynamics, models.generator
    params = list(dyn.parameters()) + list(gen.patch_decoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    order_rng = random.Random(config.seed)
    order = []
    curve = []
    batch = 8
    for step in range(config.warmstart_steps):
        loss = torch.zeros(())
        for _ in range(batch):
            if not order:
                order = list(range(len(samples)))
                order_rng.shuffle(order)
            d, target_patch = samples[order.pop()]
            loss = loss + codec_reconstruction_loss(
                models, entity_from_detection(0, d), target_patch)
        loss = loss / batch
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.detach())))
        if step % 50 == 0:
            log(f"warm start step {step}: loss={curve[-1][1]:.5f}")
    box_err = reconstruction_box_error(dyn, samples)
    log(f"warm start done: {len(samples)} entities, "
        f"box round-trip error {box_err:.2f} px")
    return curve, box_err


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

def _train_pairs(manifest, records):
    """(frame, record) pairs for the train split, in manifest order."""
    by_frame = {r.frame_id: r for r in records}
    pairs = []
    for seq_id in manifest.ids("train"):
        seq = worldgen.load_sequence(manifest, seq_id)
        for t in range(len(seq.frames) - 1):
            rec = by_frame.get(f"{seq_id}/frame_{t}")
            if rec is not None:
                pairs.append((seq.frames[t], rec))
    return pairs, by_frame


def validation_l_pred(models, manifest, config, split="val"):
    """Mean rollout l_pred over a split, no parameter updates."""
    values = []
    with torch.no_grad():
        for seq_id in manifest.ids(split):
            seq = worldgen.load_sequence(manifest, seq_id)
            res = rollout(seq, {}, models, config)
            if not res.skipped:
                values.append(float(res.bundle.l_pred))
    return float(np.mean(values)) if values else float("nan")


def train(config, manifest, records, out_dir, phase="both",
          seg_checkpoint=None, log=print):
    """Run the two-phase schedule; returns dict of artifact paths/metrics."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    np.random.seed(config.seed)
    models = build_models(config.image_size, seed=config.seed)

    pairs, by_frame = _train_pairs(manifest, records)
    result = {"out_dir": out_dir, "skips": 0}

    seg_ckpt_path = os.path.join(out_dir, "segmenter_pretrained.pt")
    if phase in ("both", "1"):
        if not pairs:
            raise MissingCheckpointError("no pseudo annotations for phase 1")
        curve = pretrain(models.segmenter, pairs, config.phase1_steps,
                         lr=config.lr, seed=config.seed, log=log)
        ckpt.save_checkpoint(seg_ckpt_path, {"segmenter": models.segmenter},
                             config=asdict(config),
                             extra={"loss_curve": curve})
        result["phase1_curve"] = curve
        result["segmenter_checkpoint"] = seg_ckpt_path
    else:
        path = seg_checkpoint or seg_ckpt_path
        if not os.path.exists(path):
            raise MissingCheckpointError(
                f"phase 2 requires a phase-1 segmenter checkpoint; not found: {path}. "
                "Run phase 1 (pretrain-seg) first or pass --seg-checkpoint.")
        ckpt.restore(ckpt.load_checkpoint(path), segmenter=models.segmenter)

    if phase == "1":
        return result

    # ---- phase 2: joint optimization over rollouts ----
    if config.warmstart_steps:
        ws_curve, ws_box_err = warm_start(models, manifest, config, log=log)
        result["warmstart_curve"] = ws_curve
        result["warmstart_box_err_px"] = ws_box_err
    opt = torch.optim.Adam(models.parameters(), lr=config.lr)
    train_ids = manifest.ids("train")
    order_rng = random.Random(config.seed)
    seq_cache = {sid: worldgen.load_sequence(manifest, sid) for sid in train_ids}

    val_start = validation_l_pred(models, manifest, config)
    result["val_l_pred_start"] = val_start
    log(f"phase 2 start: val l_pred = {val_start:.5f}")

    metrics_path = os.path.join(out_dir, "metrics.csv")
    fields = ["step", "l_pred_final", "l_pred_unrefined", "l_pred_masked",
              "l_con", "l_seg", "l_pred", "total", "l_recon", "alpha", "c1", "c2"]
    skips = 0
    with open(metrics_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        order = train_ids.copy()
        order_rng.shuffle(order)
        pos = 0
        for step in range(config.phase2_steps):
            if pos >= len(order):
                order_rng.shuffle(order)
                pos = 0
            seq = seq_cache[order[pos]]
            pos += 1
            res = rollout(seq, by_frame, models, config)
            if res.skipped:
                skips += 1
                log(f"step {step}: skipped {seq.seq_id}: {res.skip_reason}")
                continue
            # the autoencoding anchor from the warm start stays on during
            # joint training; without it the consistency gradients erode the
            # codec and decoded boxes drift off the entities they encode
            f0 = frame_to_tensor(seq.frames[0])
            recon = torch.zeros(())
            for e in res.entities0:
                recon = recon + codec_reconstruction_loss(
                    models, e, crop_resize(f0, e.box.detach()))
            recon = config.recon_weight * recon
            opt.zero_grad()
            (res.bundle.total + recon).backward()
            # clip per module: the consistency term's gradient norm dwarfs
            # the seg/prediction losses, and a single global clip would
            # scale the segmenter's and generator's gradients to nothing
            for m in (models.segmenter, models.dynamics, models.generator):
                torch.nn.utils.clip_grad_norm_(list(m.parameters()), 5.0)
            opt.step()
            row = {k: v for k, v in res.bundle.floats().items() if k in fields}
            row["l_recon"] = float(recon.detach())
            row["step"] = step
            writer.writerow(row)
            if step % 25 == 0:
                log(f"step {step}: total={row['total']:.5f} l_pred={row['l_pred']:.5f}")
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                ckpt.save_checkpoint(os.path.join(out_dir, f"joint_step{step + 1}.pt"),
                                     models.state(), config=asdict(config))

    val_end = validation_l_pred(models, manifest, config)
    result["val_l_pred_end"] = val_end
    log(f"phase 2 end: val l_pred = {val_end:.5f} (start {val_start:.5f}), "
        f"skips = {skips}")

    final_path = os.path.join(out_dir, "joint_final.pt")
    ckpt.save_checkpoint(final_path, models.state(), config=asdict(config),
                         extra={"val_l_pred_start": val_start,
                                "val_l_pred_end": val_end, "skips": skips})
    result.update(final_checkpoint=final_path, metrics=metrics_path, skips=skips)
    return result


def load_models(path, image_size=64):
    payload = ckpt.load_checkpoint(path)
    models = build_models(image_size)
    if "dynamics" in payload["modules"]:
        ckpt.restore(payload, **models.state())
    else:
        ckpt.restore(payload, segmenter=models.segmenter)
    return models
