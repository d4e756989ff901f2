"""Run configuration: one flat record loaded from JSON, with unknown keys rejected."""

from __future__ import annotations

import json
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .denoiser import CONFIGS
from .scenes import DEFAULT_RATIOS, SPLITS

DATA_ENV = "VITTS_DATA_DIR"
STAGE_STEPS = {"encoder": 1000, "denoiser": 2000, "finetune": 2000}


class ConfigError(ValueError):
    pass


def _default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data")


@dataclass
class RunConfig:
    # paths
    data_dir: str = field(default_factory=_default_data_dir)
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    run_name: Optional[str] = None  # fine-tune run directory; derived from the ablation flags when unset
    # model and schedule
    model_size: str = "S"
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.06
    # training
    encoder_steps: int = STAGE_STEPS["encoder"]
    denoiser_steps: int = STAGE_STEPS["denoiser"]
    finetune_steps: int = STAGE_STEPS["finetune"]
    batch_size: int = 16
    lr: float = 2e-4
    warmup: int = 100
    grad_clip: float = 1.0
    seed: int = 0
    bf16: bool = True
    ckpt_every: int = 500
    log_every: int = 50
    train_fraction: float = 1.0
    # mode flags
    text_only: bool = False
    random_image: bool = False
    literal_percent: bool = False
    masked_only_loss: bool = False
    no_encoder_pretrain: bool = False
    no_decoder_pretrain: bool = False
    from_scratch: bool = False
    # synthetic data
    n_samples: int = 128
    n_rooms: int = 12
    n_holdout: int = 2
    image_mode: str = "mean"
    split_ratios: dict = field(default_factory=lambda: dict(DEFAULT_RATIOS))
    # sampling and evaluation
    split: str = "test-unseen"
    eval_splits: list = field(default_factory=lambda: ["test-seen", "test-unseen"])
    eval_subset: Optional[int] = None  # None -> min(50, split size)
    teacher_forcing: bool = True
    gl_iters: int = 60
    sample_batch: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model_size not in CONFIGS:
            raise ConfigError(f"unknown model size {self.model_size!r}; choose from {sorted(CONFIGS)}")
        if self.n_holdout >= self.n_rooms:
            raise ConfigError(f"n_holdout ({self.n_holdout}) must be smaller than n_rooms ({self.n_rooms})")
        if self.n_holdout < 1:
            raise ConfigError("n_holdout must be at least 1")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.image_mode not in ("mean", "textured"):
            raise ConfigError(f"unknown image_mode {self.image_mode!r}")
        for s in [self.split, *self.eval_splits]:
            if s not in SPLITS:
                raise ConfigError(f"unknown split {s!r}")
        if set(self.split_ratios) != set(SPLITS):
            raise ConfigError(f"split_ratios must name exactly {list(SPLITS)}")
        if min(self.batch_size, self.diffusion_steps, self.gl_iters, self.sample_batch) < 1:
            raise ConfigError("batch sizes, diffusion steps and Griffin-Lim iterations must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def ablation_tags(self) -> list[str]:
        flags = ["no_encoder_pretrain", "no_decoder_pretrain", "text_only", "random_image", "from_scratch"]
        return [f.replace("_", "-") for f in flags if getattr(self, f)]

    @property
    def finetune_name(self) -> str:
        return self.run_name or "-".join(["finetune", *self.ablation_tags])


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_snapshot(cfg: RunConfig, run_dir, command: str) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    snap = {"command": command, "version": version_string(), "config": cfg.to_dict()}
    path.write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")
    return path
