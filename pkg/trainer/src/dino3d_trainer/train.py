"""Self-distillation training loop for the 3D transformer.

A student network sees two augmented crops per volume with a fraction of
its patch tokens masked; a momentum-averaged teacher sees the same crops
unmasked. The loss combines cross-view class-token distillation, a
masked-token prediction term, and a weighted spread penalty on the
student's class embeddings. The teacher never receives gradients.
"""

import dataclasses
import logging
import os
import random
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .data import ShapeDataset, two_views
from .ema import ema_update
from .objectives import (
    RunningCenter,
    distillation_loss,
    koleo_loss,
    masked_token_loss,
    soften_teacher,
)
from .schedules import (
    DinoSchedules,
    ema_momentum_at,
    lr_at,
    sample_mask_ratio,
    teacher_temp_at,
)
from .vit3d import ProjectionHead, Vit3d, Vit3dConfig

logger = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    """Raised when the loss turns non-finite; carries the failing step."""

    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    vit: Vit3dConfig = field(default_factory=Vit3dConfig)
    sched: DinoSchedules = field(default_factory=DinoSchedules)
    koleo_weight: float = 0.1
    center_momentum: float = 0.9
    seed: int = 0
    data_dims: int = 40
    checkpoint_every: int = 0  # 0 = only at the end
    freeze_prototypes_steps: int = 0
    center_warmup_batches: int = 10

    def validate(self):
        self.vit.validate()
        self.sched.validate()
        if self.koleo_weight < 0:
            raise ValueError("koleo_weight must be >= 0")
        if self.freeze_prototypes_steps < 0:
            raise ValueError("freeze_prototypes_steps must be >= 0")
        if self.center_warmup_batches < 0:
            raise ValueError("center_warmup_batches must be >= 0")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ValueError("center_momentum must be in [0, 1)")
        if self.data_dims < self.vit.patch_size:
            raise ValueError("data_dims smaller than one patch")


@dataclass
class StepRecord:
    step: int
    dino: float
    ibot: float
    koleo: float
    total: float
    lr: float
    teacher_temp: float
    ema_momentum: float


class DistillationPair(nn.Module):
    """Backbone plus projection head; the same head maps class and patch tokens."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.backbone = Vit3d(cfg.vit)
        self.head = ProjectionHead(cfg.vit.embed_dim, out_dim=cfg.sched.head_out_dim)

    def forward(self, x, mask=None):
        cls_emb, patch_emb = self.backbone(x, mask=mask)
        cls_sphere = self.head.embed(cls_emb)
        return cls_sphere, self.head.out(cls_sphere), self.head(patch_emb)


def build_models(cfg: TrainConfig):
    """Student and teacher with identical initial weights; teacher frozen."""
    student = DistillationPair(cfg)
    teacher = DistillationPair(cfg)
    teacher.load_state_dict(student.state_dict())
    for p in teacher.parameters():
        p.requires_grad_(False)
    return student, teacher


def _sample_masks(batch, tokens, rng, sched):
    mask = np.zeros((batch, tokens), dtype=bool)
    for b in range(batch):
        ratio = sample_mask_ratio(rng, sched)
        count = max(1, int(round(ratio * tokens)))
        idx = rng.choice(tokens, size=count, replace=False)
        mask[b, idx] = True
    return torch.from_numpy(mask)


def _make_batch(dataset, cfg, rng):
    v1, v2 = [], []
    for _ in range(cfg.sched.batch_size):
        a, b = two_views(dataset.sample(), cfg.vit.crop_size, rng)
        v1.append(a)
        v2.append(b)
    to_tensor = lambda views: torch.from_numpy(np.stack(views)[:, None])
    return to_tensor(v1), to_tensor(v2)


def save_checkpoint(path, *, cfg, step, student, teacher, optimizer,
                    cls_center, patch_center, rng, dataset):
    """Atomic write: serialize to <path>.tmp, then rename over path."""
    state = {
        "config": dataclasses.asdict(cfg),
        "step": step,
        "student": student.state_dict(),
        "teacher": teacher.state_dict(),
        "optimizer": optimizer.state_dict(),
        "cls_center": cls_center.state_dict(),
        "patch_center": patch_center.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": rng.bit_generator.state,
        "python_rng": random.getstate(),
        "data_rng": dataset.rng_state(),
    }
    tmp = f"{path}.tmp"
    torch.save(state, tmp)
    os.replace(tmp, path)


def load_train_config(state) -> TrainConfig:
    raw = state["config"]
    return TrainConfig(
        vit=Vit3dConfig(**raw["vit"]),
        sched=DinoSchedules(**raw["sched"]),
        **{k: v for k, v in raw.items() if k not in ("vit", "sched")},
    )


def train_toy(cfg: TrainConfig, steps, checkpoint_path=None, dataset=None,
              resume_state=None):
    """Run ``steps`` optimization steps; returns (records, final state dict).

    With ``resume_state`` (a loaded checkpoint) training continues exactly
    where it stopped: model, optimizer, centers, and every RNG stream are
    restored, so an interrupted run and a straight-through run produce the
    same trace.
    """
    cfg.validate()
    tokens = cfg.vit.token_count

    if resume_state is None:
        torch.manual_seed(cfg.seed)
        random.seed(cfg.seed ^ 0x5EED)
        rng = np.random.default_rng(cfg.seed + 1)
        if dataset is None:
            dataset = ShapeDataset(cfg.data_dims, seed=cfg.seed + 2)
        student, teacher = build_models(cfg)
        optimizer = torch.optim.AdamW(student.parameters(), lr=cfg.sched.base_lr)
        cls_center = RunningCenter(cfg.sched.head_out_dim, cfg.center_momentum)
        patch_center = RunningCenter(cfg.sched.head_out_dim, cfg.center_momentum)
        # Pre-converge the logit centers on no-grad teacher passes so the
        # first optimized steps see stationary targets instead of a center
        # still sliding toward its running mean.
        with torch.no_grad():
            for _ in range(cfg.center_warmup_batches):
                warm1, warm2 = _make_batch(dataset, cfg, rng)
                _, wc1, wp1 = teacher(warm1)
                _, wc2, wp2 = teacher(warm2)
                cls_center.update(torch.cat([wc1, wc2]))
                patch_center.update(torch.cat([wp1, wp2]))
        start_step = 0
    else:
        cfg = load_train_config(resume_state)
        cfg.validate()
        student, teacher = build_models(cfg)
        student.load_state_dict(resume_state["student"])
        teacher.load_state_dict(resume_state["teacher"])
        optimizer = torch.optim.AdamW(student.parameters(), lr=cfg.sched.base_lr)
        optimizer.load_state_dict(resume_state["optimizer"])
        cls_center = RunningCenter(cfg.sched.head_out_dim, cfg.center_momentum)
        cls_center.load_state_dict(resume_state["cls_center"])
        patch_center = RunningCenter(cfg.sched.head_out_dim, cfg.center_momentum)
        patch_center.load_state_dict(resume_state["patch_center"])
        torch.set_rng_state(resume_state["torch_rng"])
        random.setstate(resume_state["python_rng"])
        rng = np.random.default_rng()
        rng.bit_generator.state = resume_state["numpy_rng"]
        if dataset is None:
            dataset = ShapeDataset(cfg.data_dims)
        dataset.set_rng_state(resume_state["data_rng"])
        start_step = resume_state["step"]

    records = []
    for step in range(start_step, start_step + steps):
        lr = lr_at(step, cfg.sched)
        for group in optimizer.param_groups:
            group["lr"] = lr
        t_temp = teacher_temp_at(step, cfg.sched)
        momentum = ema_momentum_at(step, cfg.sched)

        view1, view2 = _make_batch(dataset, cfg, rng)
        mask1 = _sample_masks(cfg.sched.batch_size, tokens, rng, cfg.sched)
        mask2 = _sample_masks(cfg.sched.batch_size, tokens, rng, cfg.sched)

        with torch.no_grad():
            _, t_cls1, t_pat1 = teacher(view1)
            _, t_cls2, t_pat2 = teacher(view2)
            probs_cls1 = soften_teacher(t_cls1, cls_center.value, t_temp)
            probs_cls2 = soften_teacher(t_cls2, cls_center.value, t_temp)
            probs_pat1 = soften_teacher(t_pat1, patch_center.value, t_temp)
            probs_pat2 = soften_teacher(t_pat2, patch_center.value, t_temp)

        s_emb1, s_cls1, s_pat1 = student(view1, mask=mask1)
        s_emb2, s_cls2, s_pat2 = student(view2, mask=mask2)

        st = cfg.sched.student_temp
        dino = 0.5 * (
            distillation_loss(s_cls1, probs_cls2, st)
            + distillation_loss(s_cls2, probs_cls1, st)
        )
        ibot = 0.5 * (
            masked_token_loss(s_pat1, probs_pat1, mask1, st)
            + masked_token_loss(s_pat2, probs_pat2, mask2, st)
        )
        koleo = 0.5 * (koleo_loss(s_emb1) + koleo_loss(s_emb2))
        total = dino + ibot + cfg.koleo_weight * koleo

        if not torch.isfinite(total):
            raise TrainingAbort(step, f"non-finite loss at step {step}")

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if step < cfg.freeze_prototypes_steps:
            # Early instability guard: hold the output projection at its
            # initialization so the logit space cannot collapse to a
            # constant while the backbone is still settling.
            for p in student.head.out.parameters():
                p.grad = None
        optimizer.step()
        ema_update(teacher, student, momentum)
        cls_center.update(torch.cat([t_cls1, t_cls2]))
        patch_center.update(torch.cat([t_pat1, t_pat2]))

        records.append(
            StepRecord(
                step=step,
                dino=dino.detach().item(),
                ibot=ibot.detach().item(),
                koleo=koleo.detach().item(),
                total=total.detach().item(),
                lr=lr,
                teacher_temp=t_temp,
                ema_momentum=momentum,
            )
        )
        if step % 20 == 0:
            logger.info(
                "step %d: total %.4f (dino %.4f, ibot %.4f, koleo %.4f)",
                step, records[-1].total, records[-1].dino,
                records[-1].ibot, records[-1].koleo,
            )

        end_step = step + 1
        if checkpoint_path and (
            end_step == start_step + steps
            or (cfg.checkpoint_every and end_step % cfg.checkpoint_every == 0)
        ):
            save_checkpoint(
                checkpoint_path, cfg=cfg, step=end_step, student=student,
                teacher=teacher, optimizer=optimizer, cls_center=cls_center,
                patch_center=patch_center, rng=rng, dataset=dataset,
            )

    final = {
        "cfg": cfg,
        "student": student,
        "teacher": teacher,
    }
    return records, final


def smoothed(values, window=20):
    """Moving average used for the loss-decrease check."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) < window:
        return arr
    kernel = np.ones(window) / window
    return np.convolve(arr, kernel, mode="valid")
