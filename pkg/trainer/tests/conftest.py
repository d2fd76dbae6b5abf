"""Shared fixtures: one toy training run reused across acceptance tests."""

import pytest

from dino3d_trainer import DinoSchedules, TrainConfig, Vit3dConfig, train_toy

TOY_CONFIG = TrainConfig(
    vit=Vit3dConfig(patch_size=4, embed_dim=48, depth=8, heads=6, crop_size=16),
    sched=DinoSchedules(
        base_lr=2e-3,
        warmup_steps=20,
        total_steps=200,
        batch_size=4,
        teacher_temp_start=0.01,
        teacher_temp_end=0.01,
    ),
    seed=0,
    freeze_prototypes_steps=80,
)

TINY_CONFIG = TrainConfig(
    vit=Vit3dConfig(patch_size=4, embed_dim=24, depth=8, heads=6, crop_size=16),
    sched=DinoSchedules(
        base_lr=2e-3,
        warmup_steps=5,
        total_steps=30,
        batch_size=2,
        teacher_temp_start=0.01,
        teacher_temp_end=0.01,
    ),
    seed=4,
    freeze_prototypes_steps=10,
)


def emit(request, num, ok, detail):
    """Print one scoreboard line per release criterion."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    status = "PASS" if ok else "FAIL"
    reporter.write_line(f"[criterion {num}] {status}: {detail}")


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The pinned 200-step toy training run: (records, checkpoint path)."""
    path = tmp_path_factory.mktemp("toy") / "checkpoint.pt"
    records, _ = train_toy(TOY_CONFIG, 200, checkpoint_path=path)
    return records, path
