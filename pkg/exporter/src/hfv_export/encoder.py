"""ViT-L/14 vision transformer with intermediate-layer taps.

Geometry is fixed to the L/14 variant: 14x14 patches over 224x224 input
give a 16x16 grid, so 256 patch tokens plus CLS = 257 tokens at width 1024
across 24 pre-norm blocks. ``forward`` returns the token features of the
tapped blocks concatenated along the channel axis; no final layer norm is
applied to the taps, so each slice is the raw residual-stream state after
its block.
"""

from __future__ import annotations

import torch
from torch import nn

IMAGE_SIZE = 224
PATCH_SIZE = 14
WIDTH = 1024
DEPTH = 24
HEADS = 16
MLP_RATIO = 4

GRID = IMAGE_SIZE // PATCH_SIZE
NUM_TOKENS = GRID * GRID + 1

# Channel normalization constants published with the pretrained encoder.
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


class Block(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(WIDTH)
        self.attn = nn.MultiheadAttention(WIDTH, HEADS, batch_first=True)
        self.ln2 = nn.LayerNorm(WIDTH)
        self.mlp = nn.Sequential(
            nn.Linear(WIDTH, MLP_RATIO * WIDTH),
            nn.GELU(),
            nn.Linear(MLP_RATIO * WIDTH, WIDTH),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.ln1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class TappedViT(nn.Module):
    """Encoder that exposes the token states after selected blocks."""

    def __init__(self, tap_layers: tuple[int, ...]) -> None:
        super().__init__()
        if len(tap_layers) != 4:
            raise ValueError(f"exactly 4 tap layers required, got {tap_layers}")
        bad = [i for i in tap_layers if not 1 <= i <= DEPTH]
        if bad:
            raise ValueError(f"tap layers {bad} outside [1, {DEPTH}]")
        self.tap_layers = tuple(int(i) for i in tap_layers)
        self.patch_embed = nn.Conv2d(3, WIDTH, kernel_size=PATCH_SIZE,
                                     stride=PATCH_SIZE, bias=False)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, WIDTH))
        self.pos_embed = nn.Parameter(torch.zeros(1, NUM_TOKENS, WIDTH))
        self.ln_pre = nn.LayerNorm(WIDTH)
        self.blocks = nn.ModuleList(Block() for _ in range(DEPTH))

    @torch.no_grad()
    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """[B x 3 x 224 x 224] pixels -> [B x 257 x 4096] tapped features."""
        b = frames.shape[0]
        x = self.patch_embed(frames).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = self.ln_pre(x + self.pos_embed)
        taps = []
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if depth in self.tap_layers:
                taps.append(x)
        return torch.cat(taps, dim=2)


def build_encoder(tap_layers: tuple[int, ...], seed: int,
                  weights: str | None = None) -> TappedViT:
    """Construct the frozen encoder.

    With ``weights`` the state dict is loaded from disk; otherwise parameters
    are drawn from a seeded generator, which keeps exports reproducible in
    environments without the pretrained checkpoint.
    """
    model = TappedViT(tap_layers)
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    else:
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for param in model.parameters():
                param.copy_(torch.empty_like(param).normal_(
                    0.0, 0.02, generator=generator))
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model
