"""Controllable fine-tuning: a frozen copy of the pretrained denoiser driven by a
trainable copy through zero-initialised 1x1 bridges."""

from __future__ import annotations

import copy
import hashlib
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .denoiser import DiffusionTransformer


class ZeroBridge(nn.Module):
    """Kernel-1 convolution over frames (a per-frame linear map), zero weight and bias."""

    def __init__(self, width: int):
        super().__init__()
        self.linear = nn.Linear(width, width)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        return self.linear(x)


class ControlModel(nn.Module):
    """Locked pretrained denoiser + trainable copy + one zero bridge per block.

    The trainable copy sees the real condition; the locked copy always runs
    unconditionally and produces the final prediction. Bridge ``i`` carries
    the trainable copy's block-``i`` output into the locked block-``i`` input.
    """

    def __init__(self, pretrained: DiffusionTransformer):
        super().__init__()
        self.locked = copy.deepcopy(pretrained)
        self.trainable = copy.deepcopy(pretrained)
        for p in self.locked.parameters():
            p.requires_grad_(False)
        H = pretrained.config.hidden
        self.bridges = nn.ModuleList(ZeroBridge(H) for _ in range(pretrained.config.layers))

    @property
    def config(self):
        return self.locked.config

    def train(self, mode: bool = True):
        super().train(mode)
        self.locked.eval()
        return self

    def forward(self, x_t, t, cond=None, mask=None):
        control = self.trainable.block_outputs(x_t, t, cond, mask)
        injections = [bridge(h) for bridge, h in zip(self.bridges, control)]
        return self.locked(x_t, t, None, mask, injections=injections)


def make_control_pair(pretrained: DiffusionTransformer) -> ControlModel:
    return ControlModel(pretrained)


def control_forward(cm: ControlModel, x_t, t, cond=None, mask=None):
    return cm(x_t, t, cond, mask)


def bridge_parameter_count(cm: ControlModel) -> int:
    return sum(p.numel() for p in cm.bridges.parameters())


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter's name and raw bytes, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
