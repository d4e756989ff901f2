"""A few-minute end-to-end run: corpus, both pretraining stages, fine-tune, sample, eval.

The step counts are far too small for useful audio. The point is to see every stage run
and where its files land.
"""

import sys
import tempfile
from pathlib import Path

from vitts import cli
from vitts.config import RunConfig

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="vitts-demo-"))
cfg = RunConfig(
    data_dir=str(root / "data"), checkpoint_dir=str(root / "checkpoints"), output_dir=str(root / "outputs"),
    n_samples=32, n_rooms=6, n_holdout=2, encoder_steps=40, denoiser_steps=40, finetune_steps=40,
    batch_size=4, warmup=10, eval_subset=4,
)
cli.cmd_synth_data(cfg)
cli.cmd_pretrain(cfg, "encoder")
cli.cmd_pretrain(cfg, "denoiser")
cli.cmd_finetune(cfg)
for split in cfg.eval_splits:
    cli.cmd_sample(cfg, split=split)
cli.cmd_eval(cfg)
print(f"files under {root}")
