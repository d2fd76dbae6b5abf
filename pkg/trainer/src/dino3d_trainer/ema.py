"""Exponential-moving-average update of the teacher from the student."""

import torch


@torch.no_grad()
def ema_update(teacher, student, momentum):
    """teacher <- momentum * teacher + (1 - momentum) * student, in place.

    momentum 1 leaves the teacher bit-for-bit unchanged; momentum 0
    copies the student exactly. Parameter sets must match by name and
    shape.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        missing = t_params.keys() ^ s_params.keys()
        raise ValueError(f"parameter sets differ: {sorted(missing)}")
    if momentum == 1.0:
        return
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(
                f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}"
            )
        if momentum == 0.0:
            tp.copy_(sp)
        else:
            tp.mul_(momentum).add_(sp, alpha=1.0 - momentum)
