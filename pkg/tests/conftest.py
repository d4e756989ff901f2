"""Session fixtures: one toy dataset and one pair of pretrained checkpoints shared by the slow tests."""

import json
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vitts import cli  # noqa: E402
from vitts.config import RunConfig  # noqa: E402


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Desk-scale data plus encoder (1k steps) and denoiser (2k steps) pretraining via the CLI commands."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = RunConfig(
        data_dir=str(root / "data"),
        checkpoint_dir=str(root / "checkpoints"),
        output_dir=str(root / "outputs"),
    )
    timings = {}
    t0 = time.perf_counter()
    counts = cli.cmd_synth_data(cfg)
    timings["synth-data"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    enc = cli.cmd_pretrain(cfg, "encoder")
    timings["pretrain-encoder"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    den = cli.cmd_pretrain(cfg, "denoiser")
    timings["pretrain-denoiser"] = time.perf_counter() - t0
    return SimpleNamespace(root=root, cfg=cfg, counts=counts, encoder=enc, denoiser=den, timings=timings)


TOY_SEEDS = (0, 1, 2)
TOY_STEPS = 500
TOY_BATCH = 8


def _unseen_rte(cfg, out_dir):
    report = cli.cmd_eval(cfg, generated=out_dir, splits=["test-unseen"])["test-unseen"]["rte"]
    return report["mean"], report["n"]


@pytest.fixture(scope="session")
def toy_study(pipeline):
    """Three seeds of: full fine-tune, text-only fine-tune, and the full model sampled with random images.

    Returns per-arm test-unseen RTE for every seed. Pretraining time is in ``pipeline.timings``.
    """
    cfg = pipeline.cfg.replace(finetune_steps=TOY_STEPS, batch_size=TOY_BATCH)
    out = pipeline.root / "toy"
    rte = {"true": [], "random": [], "text-only": []}
    scored = {k: [] for k in rte}
    full_runs, valid = [], []
    start = time.perf_counter()
    for seed in TOY_SEEDS:
        full = cfg.replace(seed=seed, run_name=f"full-s{seed}")
        text = cfg.replace(seed=seed, run_name=f"text-only-s{seed}", text_only=True)
        cli.cmd_finetune(full)
        cli.cmd_finetune(text)
        run = cli.stage_dir(full, full.finetune_name)
        full_runs.append(run)
        valid.append(json.loads((run / "metrics.jsonl").read_text())["valid"]["total"])
        arms = (
            ("true", full, run / "checkpoint.npz"),
            ("random", full.replace(random_image=True), run / "checkpoint.npz"),
            ("text-only", text, cli.stage_dir(text, text.finetune_name) / "checkpoint.npz"),
        )
        for arm, arm_cfg, path in arms:
            dest = out / f"{arm}-s{seed}"
            cli.cmd_sample(arm_cfg, path, "test-unseen", dest)
            mean, n = _unseen_rte(arm_cfg, dest)
            rte[arm].append(mean)
            scored[arm].append(n)
    elapsed = time.perf_counter() - start
    return SimpleNamespace(
        cfg=cfg, rte=rte, scored=scored, full_runs=full_runs, full_valid=valid, seconds=elapsed,
        pretrain_seconds=pipeline.timings["pretrain-encoder"] + pipeline.timings["pretrain-denoiser"],
    )


ACCEPTANCE_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:02d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
