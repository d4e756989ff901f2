"""Training loops for the three stages: masked-LM encoder pretraining,
span-masked denoiser pretraining and controllable fine-tuning.

Every step draws its batch and noise from generators keyed on ``(seed, step)``,
so an interrupted run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .control import ControlModel
from .denoiser import DenoiserConfig, DiffusionTransformer, make_config
from .diffusion import DiffusionSchedule, make_schedule
from .encoder import PAD_ID, VisualTextEncoder
from .model import Item, VisualTTS, collate
from .pretraining import MaskedLMHead, mask_batch, masked_lm_loss, pretrain_denoiser_step
from .scenes import sample_text

log = logging.getLogger(__name__)

OPT_PREFIX = "optimizer/"


def step_generators(seed: int, step: int):
    """Per-step numpy and torch random sources; also reseeds torch's global RNG for dropout."""
    rng = np.random.default_rng([int(seed), int(step)])
    s = int(np.random.SeedSequence([int(seed), int(step), 1]).generate_state(1)[0])
    torch.manual_seed(s)
    return rng, torch.Generator().manual_seed(s)


def warmup_lambda(warmup: int):
    return lambda i: min(1.0, (i + 1) / warmup) if warmup > 0 else 1.0


def optimizer_tensors(opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{OPT_PREFIX}{idx}/{k}"] = torch.as_tensor(v)
    return out


def restore_optimizer(opt: torch.optim.Optimizer, arrays: dict) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for key, arr in arrays.items():
        if not key.startswith(OPT_PREFIX):
            continue
        idx, name = key[len(OPT_PREFIX):].split("/")
        state.setdefault(int(idx), {})[name] = torch.as_tensor(arr)
    sd["state"] = state
    opt.load_state_dict(sd)


def model_arrays(arrays: dict) -> dict:
    return {k: v for k, v in arrays.items() if not k.startswith(OPT_PREFIX)}


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # one dict per step
    last_step: int = 0


def run_training(
    module: nn.Module,
    step_fn: Callable,
    steps: int,
    seed: int,
    lr: float = 2e-4,
    warmup: int = 100,
    grad_clip: float = 1.0,
    header: Optional[dict] = None,
    ckpt_path=None,
    ckpt_every: int = 0,
    resume: bool = False,
    log_path=None,
    log_every: int = 50,
    stop_after: Optional[int] = None,
    on_step: Optional[Callable] = None,
    bf16: bool = False,
) -> TrainResult:
    """Adam with linear warmup. ``step_fn(step, rng, gen)`` returns a dict with a ``total`` loss.

    ``stop_after`` ends the loop early (simulating an interruption) after that step.
    ``bf16`` runs forward passes under CPU bfloat16 autocast; weights, optimizer
    state and the loss stay in float32.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_lambda(warmup))
    start = 1
    header = dict(header or {})
    if resume:
        if ckpt_path is None or not Path(ckpt_path).exists():
            raise FileNotFoundError(f"nothing to resume from: {ckpt_path}")
        h, arrays = ckpt.load_checkpoint(ckpt_path)
        for key in ("kind", "config_name", "seed", "steps"):
            if key in header and h.get(key) != header[key]:
                raise ckpt.CheckpointError(f"resume mismatch on {key}: {h.get(key)!r} != {header[key]!r}")
        ckpt.load_into(module, model_arrays(arrays))
        restore_optimizer(opt, arrays)
        start = int(h["step"]) + 1
        # fast-forward the schedule without stepping it (stepping before opt.step() warns)
        sched.last_epoch = start - 1
        for group, base in zip(opt.param_groups, sched.base_lrs):
            group["lr"] = base * warmup_lambda(warmup)(start - 1)
    result = TrainResult(last_step=start - 1)
    log_file = open(log_path, "a") if log_path else None
    module.train()
    try:
        for step in range(start, steps + 1):
            rng, gen = step_generators(seed, step)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=bf16):
                out = step_fn(step, rng, gen)
            opt.zero_grad(set_to_none=True)
            out["total"].backward()
            if grad_clip:
                torch.nn.utils.clip_grad_norm_(params, grad_clip)
            opt.step()
            sched.step()
            rec = {k: float(v.detach()) for k, v in out.items()}
            result.losses.append(rec)
            result.last_step = step
            if on_step is not None:
                on_step(step, module, rec)
            if log_file and (step % log_every == 0 or step == steps):
                log_file.write(json.dumps({"step": step, **{k: round(v, 6) for k, v in rec.items()}}) + "\n")
                log_file.flush()
            done = step == steps or (stop_after is not None and step >= stop_after)
            if ckpt_path and (done or (ckpt_every and step % ckpt_every == 0)):
                tensors = {**ckpt.module_tensors(module), **optimizer_tensors(opt)}
                ckpt.save_checkpoint(ckpt_path, tensors, {**header, "step": step})
            if done:
                break
    finally:
        if log_file:
            log_file.close()
    return result


# ---------------------------------------------------------------------------
# stage 1: masked phoneme LM


def text_batch(rng: np.random.Generator, batch_size: int) -> torch.Tensor:
    seqs = [sample_text(rng) for _ in range(batch_size)]
    L = max(len(s) for s in seqs)
    out = torch.full((batch_size, L), PAD_ID, dtype=torch.long)
    for b, s in enumerate(seqs):
        out[b, : len(s)] = torch.as_tensor(s)
    return out


def pretrain_encoder(steps: int = 1000, batch_size: int = 16, seed: int = 0, lr: float = 2e-4, warmup: int = 100,
                     encoder_kwargs: Optional[dict] = None, **kwargs):
    """Masked-LM pretraining on generated text-only utterances."""
    torch.manual_seed(seed)
    head = MaskedLMHead(VisualTextEncoder(text_only=True, **(encoder_kwargs or {})))

    def step_fn(step, rng, gen):
        phon = text_batch(rng, batch_size)
        corrupted, targets = mask_batch(phon, rng, head.encoder.vocab_size)
        return {"total": masked_lm_loss(head(corrupted), targets)}

    header = {"kind": "encoder", "seed": seed, "steps": steps}
    res = run_training(head, step_fn, steps, seed, lr, warmup, header=header, **kwargs)
    return head, res


# ---------------------------------------------------------------------------
# stage 2: unconditional denoiser


def pretrain_denoiser(items: Sequence[Item], config: DenoiserConfig, sched: Optional[DiffusionSchedule] = None,
                      steps: int = 2000, batch_size: int = 16, seed: int = 0, lr: float = 2e-4, warmup: int = 100,
                      literal_percent: bool = False, masked_only: bool = False, **kwargs):
    sched = sched or make_schedule()
    if not items:
        raise ValueError("no training mels for denoiser pretraining")
    torch.manual_seed(seed)
    model = DiffusionTransformer(config)

    def step_fn(step, rng, gen):
        idx = rng.choice(len(items), size=min(batch_size, len(items)), replace=False)
        b = collate([items[i] for i in idx])
        loss = pretrain_denoiser_step(model, b.mel, sched, rng, gen, mask=b.frame_mask,
                                      masked_only=masked_only, literal_percent=literal_percent)
        return {"total": loss}

    header = {"kind": "denoiser", "seed": seed, "steps": steps, **ckpt.denoiser_header(config)}
    res = run_training(model, step_fn, steps, seed, lr, warmup, header=header, **kwargs)
    return model, res


# ---------------------------------------------------------------------------
# stage 3: fine-tuning


def build_tts(config: DenoiserConfig, encoder_arrays: Optional[dict] = None, denoiser_arrays: Optional[dict] = None,
              text_only: bool = False, seed: int = 0, control: Optional[bool] = None) -> VisualTTS:
    """Assemble the fine-tuning model.

    A pretrained denoiser yields a control pair (locked + trainable copy);
    without one the decoder is a fresh conditional transformer trained in full.
    """
    torch.manual_seed(seed)
    encoder = VisualTextEncoder(text_only=text_only)
    if encoder_arrays is not None:
        ckpt.load_into(encoder, model_arrays(encoder_arrays), prefix="encoder.", strict=False)
    control = denoiser_arrays is not None if control is None else control
    if control:
        base = DiffusionTransformer(config, cond_dim=encoder.width)
        if denoiser_arrays is not None:
            ckpt.load_into(base, model_arrays(denoiser_arrays))
        decoder = ControlModel(base)
    else:
        decoder = DiffusionTransformer(config, cond_dim=encoder.width)
    return VisualTTS(config, text_only=text_only, encoder=encoder, decoder=decoder)


def tts_header(model: VisualTTS, seed: int, steps: int) -> dict:
    return {"kind": "tts", "seed": seed, "steps": steps, "text_only": model.text_only,
            "control": model.is_control, **ckpt.denoiser_header(model.config)}


def finetune(model: VisualTTS, items: Sequence[Item], sched: Optional[DiffusionSchedule] = None, steps: int = 2000,
             batch_size: int = 16, seed: int = 0, lr: float = 2e-4, warmup: int = 100, **kwargs):
    sched = sched or make_schedule()
    if not items:
        raise ValueError("no fine-tuning items")

    def step_fn(step, rng, gen):
        idx = rng.choice(len(items), size=min(batch_size, len(items)), replace=False)
        return model.losses(collate([items[i] for i in idx]), sched, gen)

    res = run_training(model, step_fn, steps, seed, lr, warmup, header=tts_header(model, seed, steps), **kwargs)
    return model, res


@torch.no_grad()
def validation_loss(model: VisualTTS, items: Sequence[Item], sched: DiffusionSchedule, seed: int = 1234,
                    batch_size: int = 16) -> dict:
    """Fine-tuning loss on fixed items with fixed steps and noise, dropout off."""
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    totals: dict = {}
    n = 0
    for i in range(0, len(items), batch_size):
        b = collate(items[i : i + batch_size])
        out = model.losses(b, sched, gen)
        k = len(b.sample_ids)
        for key, v in out.items():
            totals[key] = totals.get(key, 0.0) + float(v) * k
        n += k
    model.train(was_training)
    return {k: v / n for k, v in totals.items()}


def load_tts(path) -> VisualTTS:
    header, arrays = ckpt.load_checkpoint(path)
    if header.get("kind") != "tts":
        raise ckpt.CheckpointError(f"{path}: expected a tts checkpoint, got {header.get('kind')!r}")
    config = make_config(header["config_name"]) if header["config_name"] in ("S", "B", "L", "XL") else \
        DenoiserConfig(header["layers"], header["hidden"], header["heads"], header["config_name"])
    model = build_tts(config, text_only=header["text_only"], control=header["control"])
    ckpt.load_into(model, model_arrays(arrays))
    return model
