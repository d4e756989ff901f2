"""Visual-text encoder: phoneme pre-net, relative-position self-attention,
cross-attention onto image patches, and a convolutional feed-forward layer."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .denoiser import attention

PAD_ID = 0
MASK_ID = 1
SIL_ID = 2
VOCAB_SIZE = 73
IMAGE_SIZE = 64
IMAGE_CHANNELS = 4

# ARPAbet with lexical stress on vowels (69 symbols) plus silence.
_VOWELS = "AA AE AH AO AW AY EH ER EY IH IY OW OY UH UW".split()
_CONSONANTS = "B CH D DH F G HH JH K L M N NG P R S SH T TH V W Y Z ZH".split()
DEFAULT_SYMBOLS = ["<pad>", "<mask>", "sil", "sp"] + [v + s for v in _VOWELS for s in "012"] + _CONSONANTS


def load_vocab(path) -> list[str]:
    """Read a vocabulary file: one token per line, line index is the id."""
    tokens = Path(path).read_text().splitlines()
    if len(tokens) < 3 or tokens[PAD_ID] != "<pad>" or tokens[MASK_ID] != "<mask>":
        raise ValueError(f"{path}: ids 0/1 must be <pad>/<mask>")
    return tokens


def write_vocab(path, tokens: Sequence[str] = DEFAULT_SYMBOLS) -> None:
    Path(path).write_text("\n".join(tokens) + "\n")


def check_phonemes(tokens: torch.Tensor, vocab_size: int = VOCAB_SIZE) -> None:
    if tokens.numel() == 0 or tokens.shape[-1] == 0:
        raise ValueError("empty phoneme sequence")
    if int(tokens.min()) < 0 or int(tokens.max()) >= vocab_size:
        raise ValueError(f"phoneme ids must lie in [0, {vocab_size})")


class VisualFeatureExtractor(nn.Module):
    """Two strided conv stages (7x7/2 then 3x3/2), a patch projection and a layer norm.

    Everything is bias-free, so an all-zero image maps to all-zero features.
    The norm puts patch features on the same scale as the text stream; without
    it the image contributes under 1% of the encoder output at initialisation.
    """

    def __init__(self, width: int = 256, in_channels: int = IMAGE_CHANNELS, image_size: int = IMAGE_SIZE, mid: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.conv1 = nn.Conv2d(in_channels, mid // 2, 7, stride=2, padding=3, bias=False)
        self.conv2 = nn.Conv2d(mid // 2, mid, 3, stride=2, padding=1, bias=False)
        self.proj = nn.Linear(mid, width, bias=False)
        self.norm = nn.LayerNorm(width, bias=False)

    @property
    def num_patches(self) -> int:
        return (self.image_size // 4) ** 2

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image`` is ``(B, C, H, W)`` in [0, 1]; returns ``(B, P, width)``."""
        if image.ndim != 4 or tuple(image.shape[1:]) != (self.in_channels, self.image_size, self.image_size):
            raise ValueError(
                f"expected image (B, {self.in_channels}, {self.image_size}, {self.image_size}), got {tuple(image.shape)}"
            )
        x = F.relu(self.conv1(image))
        x = F.relu(self.conv2(x))
        return self.norm(self.proj(x.flatten(2).transpose(1, 2)))


def relative_index(L_q: int, L_k: int, clip: int) -> torch.Tensor:
    """``idx[i, j] = clamp(j - i, -clip, clip) + clip``."""
    rel = torch.arange(L_k)[None, :] - torch.arange(L_q)[:, None]
    return rel.clamp(-clip, clip) + clip


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with learned relative-position tables on keys and values."""

    def __init__(self, width: int, heads: int, clip: int = 16, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.d_k = width // heads
        self.clip = clip
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.rel_k = nn.Parameter(torch.randn(heads, 2 * clip + 1, self.d_k) * self.d_k**-0.5)
        self.rel_v = nn.Parameter(torch.randn(heads, 2 * clip + 1, self.d_k) * self.d_k**-0.5)
        self.dropout = nn.Dropout(dropout)

    def split(self, x):
        B, L, _ = x.shape
        return x.view(B, L, self.heads, self.d_k).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor] = None, return_weights: bool = False):
        B, L, D = x.shape
        q, k, v = self.split(self.q(x)), self.split(self.k(x)), self.split(self.v(x))
        idx = relative_index(L, L, self.clip)
        rk = self.rel_k[:, idx]  # (heads, L, L, d_k)
        rv = self.rel_v[:, idx]
        scores = (q @ k.transpose(-1, -2) + torch.einsum("bhid,hijd->bhij", q, rk)) / math.sqrt(self.d_k)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = scores.softmax(dim=-1)
        w = self.dropout(weights)
        out = w @ v + torch.einsum("bhij,hijd->bhid", w, rv)
        out = self.out(out.transpose(1, 2).reshape(B, L, D))
        return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    """Text queries attend over visual patches; output length follows the text."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    def forward(self, h_text: torch.Tensor, visual: torch.Tensor, return_weights: bool = False):
        B, L, D = h_text.shape
        P = visual.shape[1]
        d = D // self.heads
        q = self.q(h_text).view(B, L, self.heads, d).transpose(1, 2)
        k = self.k(visual).view(B, P, self.heads, d).transpose(1, 2)
        v = self.v(visual).view(B, P, self.heads, d).transpose(1, 2)
        out, weights = attention(q, k, v, return_weights=True)
        out = self.out(out.transpose(1, 2).reshape(B, L, D))
        return (out, weights) if return_weights else out


def cross_attention(module: CrossAttention, h_text: torch.Tensor, visual: torch.Tensor) -> torch.Tensor:
    """Residual cross-attention update of the text stream."""
    return h_text + module(h_text, visual)


class ConvFeedForward(nn.Module):
    def __init__(self, width: int, filter_size: int = 1024, kernel: int = 9, dropout: float = 0.1):
        super().__init__()
        self.conv1 = nn.Conv1d(width, filter_size, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(filter_size, width, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        if mask is not None:
            x = x * mask[..., None]
        y = F.relu(self.conv1(x.transpose(1, 2)))
        return self.conv2(self.dropout(y)).transpose(1, 2)


class EncoderLayer(nn.Module):
    def __init__(self, width: int, heads: int, filter_size: int, kernel: int, dropout: float, clip: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.self_attn = RelativeSelfAttention(width, heads, clip)
        self.norm2 = nn.LayerNorm(width)
        self.cross_attn = CrossAttention(width, heads)
        self.norm3 = nn.LayerNorm(width)
        self.ffn = ConvFeedForward(width, filter_size, kernel, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, h, key_mask=None, visual=None):
        h = h + self.dropout(self.self_attn(self.norm1(h), key_mask))
        if visual is not None:
            h = h + self.dropout(self.cross_attn(self.norm2(h), visual))
        h = h + self.dropout(self.ffn(self.norm3(h), key_mask))
        if key_mask is not None:
            h = h * key_mask[..., None]
        return h


class PreNet(nn.Module):
    """Residual conv pre-net over phoneme embeddings."""

    def __init__(self, width: int, layers: int = 3, kernel: int = 5, dropout: float = 0.1):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv1d(width, width, kernel, padding=kernel // 2) for _ in range(layers))
        self.norms = nn.ModuleList(nn.LayerNorm(width) for _ in range(layers))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask=None):
        for conv, norm in zip(self.convs, self.norms):
            if mask is not None:
                x = x * mask[..., None]
            y = F.relu(conv(x.transpose(1, 2))).transpose(1, 2)
            x = x + self.dropout(norm(y))
        return x


class VisualTextEncoder(nn.Module):
    """Phonemes (+ optional room image) to a ``(B, L, width)`` hidden sequence.

    With ``text_only=True`` the visual branch is dropped entirely, which is both
    the masked-LM pretraining mode and the no-visual ablation.
    """

    def __init__(
        self,
        vocab_size: int = VOCAB_SIZE,
        width: int = 256,
        layers: int = 4,
        heads: int = 2,
        filter_size: int = 1024,
        kernel: int = 9,
        dropout: float = 0.1,
        clip: int = 16,
        prenet_layers: int = 3,
        text_only: bool = False,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.text_only = text_only
        self.embed = nn.Embedding(vocab_size, width, padding_idx=PAD_ID)
        nn.init.normal_(self.embed.weight, std=width**-0.5)
        with torch.no_grad():
            self.embed.weight[PAD_ID].zero_()
        self.prenet = PreNet(width, prenet_layers, dropout=dropout)
        self.visual = VisualFeatureExtractor(width)
        self.layers = nn.ModuleList(
            EncoderLayer(width, heads, filter_size, kernel, dropout, clip) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(width)

    def forward(
        self,
        phonemes: torch.Tensor,
        image: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
        text_only: Optional[bool] = None,
    ) -> torch.Tensor:
        """``phonemes`` is ``(B, L)``; ``mask`` marks valid (non-pad) positions."""
        check_phonemes(phonemes, self.vocab_size)
        if mask is None:
            mask = phonemes != PAD_ID
            mask[:, 0] |= ~mask.any(dim=1)
        text_only = self.text_only if text_only is None else text_only
        visual = None
        if not text_only:
            if image is None:
                raise ValueError("image required unless running text-only")
            visual = self.visual(image)
        h = self.prenet(self.embed(phonemes), mask)
        for layer in self.layers:
            h = layer(h, mask, visual)
        return self.norm(h) * mask[..., None]


def encode(encoder: VisualTextEncoder, phonemes, image=None, text_only: Optional[bool] = None) -> torch.Tensor:
    """Encode a single unbatched ``(L,)`` sequence (image ``(C, H, W)``) or a batch."""
    single = phonemes.ndim == 1
    if single:
        phonemes = phonemes[None]
        image = None if image is None else image[None]
    out = encoder(phonemes, image, text_only=text_only)
    return out[0] if single else out
