"""Training objectives: self-distillation, masked-token matching, spread.

All three consume projection-head logits or backbone embeddings; the
teacher side is expected to be detached by the caller.
"""

import logging

import torch
from torch.nn import functional as F

logger = logging.getLogger(__name__)

KOLEO_EPS = 1e-8


def soften_teacher(logits, center, temperature):
    """Centered, temperature-scaled softmax of teacher logits."""
    return F.softmax((logits - center) / temperature, dim=-1)


def distillation_loss(student_logits, teacher_probs, student_temp):
    """Cross-entropy from teacher target distributions to the student.

    ``teacher_probs`` are already softened (see soften_teacher); the
    student is log-softmaxed at its own temperature. Mean over rows.
    """
    logp = F.log_softmax(student_logits / student_temp, dim=-1)
    return -(teacher_probs * logp).sum(dim=-1).mean()


def masked_token_loss(student_patch_logits, teacher_patch_probs, mask, student_temp):
    """Distillation restricted to the student-masked token positions.

    ``mask`` is boolean (B, T); positions the student saw as mask tokens
    are matched against the teacher's (unmasked) predictions there. A
    batch with no masked positions yields zero.
    """
    if mask.shape != student_patch_logits.shape[:2]:
        raise ValueError(
            f"mask shape {tuple(mask.shape)} does not match tokens "
            f"{tuple(student_patch_logits.shape[:2])}"
        )
    if not bool(mask.any()):
        return student_patch_logits.sum() * 0.0
    logp = F.log_softmax(student_patch_logits[mask] / student_temp, dim=-1)
    return -(teacher_patch_probs[mask] * logp).sum(dim=-1).mean()


def pair_distance(x, i, j):
    """Euclidean distance between rows i and j of a 2D tensor."""
    return torch.sqrt(((x[i] - x[j]) ** 2).sum())


def koleo_loss(embeddings, eps=KOLEO_EPS):
    """Spread penalty: -mean_i log(eps + distance to nearest other row).

    Rows are L2-normalized first. Minimizing pushes every embedding away
    from its nearest neighbour on the hypersphere, discouraging collapse.
    Pairwise distances are evaluated exhaustively, one pair at a time —
    batches here are small, and the explicit loop keeps the arithmetic
    order independent of the batch layout.
    """
    n = embeddings.shape[0]
    if n < 2:
        logger.warning("spread loss needs >= 2 embeddings, got %d; returning 0", n)
        return embeddings.sum() * 0.0
    x = F.normalize(embeddings, dim=-1)
    logs = []
    for i in range(n):
        nearest = None
        for j in range(n):
            if j == i:
                continue
            d = pair_distance(x, i, j)
            nearest = d if nearest is None else torch.minimum(nearest, d)
        logs.append(torch.log(eps + nearest))
    return -torch.stack(logs).mean()


class RunningCenter:
    """Exponential moving average of teacher logit means.

    Subtracted from teacher logits before the softmax so no single output
    dimension can dominate the target distributions.
    """

    def __init__(self, dim, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"center momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self.value = torch.zeros(dim)

    @torch.no_grad()
    def update(self, teacher_logits):
        batch_mean = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
        self.value = self.momentum * self.value + (1.0 - self.momentum) * batch_mean

    def state_dict(self):
        return {"momentum": self.momentum, "value": self.value}

    def load_state_dict(self, state):
        self.momentum = state["momentum"]
        self.value = state["value"]
