"""Tiny text-conditioned U-Net denoiser with hookable cross-attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

# hook(probs [B, heads, N, L], layer_name, (h, w)) -> probs to use
AttentionHook = Callable[[torch.Tensor, str, tuple], torch.Tensor]


@dataclass(frozen=True)
class ToyArch:
    vocab_size: int = 12
    context_length: int = 10
    text_dim: int = 64
    channels: tuple[int, int, int] = (32, 64, 96)
    heads: int = 2
    head_dim: int = 32
    image_channels: int = 3
    image_size: int = 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyArch":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, name: str, channels: int, text_dim: int, heads: int, head_dim: int):
        super().__init__()
        self.name = name
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(text_dim, inner, bias=False)
        self.to_v = nn.Linear(text_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, hook: Optional[AttentionHook] = None):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # [B, N, C]
        q = self.to_q(h).view(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if hook is not None:
            probs = hook(probs, self.name, (H, W))
        out = (probs @ v).transpose(1, 2).reshape(B, H * W, -1)
        return x + self.to_out(out).transpose(1, 2).view(B, C, H, W)


class ToyDenoiser(nn.Module):
    """epsilon-prediction network ``eps(z_t, t, context)``.

    Cross-attention sits at 16x16 (down and up path) and 8x8 (middle), two heads
    each, so one forward pass yields six attention maps.
    """

    def __init__(self, arch: ToyArch = ToyArch()):
        super().__init__()
        self.arch = arch
        c1, c2, c3 = arch.channels
        td = arch.text_dim
        self.tok_emb = nn.Embedding(arch.vocab_size, td)
        self.pos_emb = nn.Parameter(torch.zeros(arch.context_length, td))
        nn.init.normal_(self.pos_emb, std=0.02)
        temb = 4 * c1
        self.time_mlp = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))

        self.conv_in = nn.Conv2d(arch.image_channels + 2, c1, 3, padding=1)
        self.res32a = ResBlock(c1, c1, temb)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res16a = ResBlock(c2, c2, temb)
        self.attn_down16 = CrossAttention("down16", c2, td, arch.heads, arch.head_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.res8a = ResBlock(c3, c3, temb)
        self.attn_mid8 = CrossAttention("mid8", c3, td, arch.heads, arch.head_dim)
        self.res8b = ResBlock(c3, c3, temb)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.res16b = ResBlock(2 * c2, c2, temb)
        self.attn_up16 = CrossAttention("up16", c2, td, arch.heads, arch.head_dim)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.res32b = ResBlock(2 * c1, c1, temb)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, arch.image_channels, 3, padding=1)

        s = arch.image_size
        ys, xs = torch.meshgrid(torch.linspace(-1, 1, s), torch.linspace(-1, 1, s), indexing="ij")
        self.register_buffer("coords", torch.stack([xs, ys])[None], persistent=False)

    @property
    def attention_layers(self) -> list[CrossAttention]:
        return [self.attn_down16, self.attn_mid8, self.attn_up16]

    def text_encode(self, ids: torch.Tensor) -> torch.Tensor:
        """Token ids ``[B, L]`` to context embeddings ``[B, L, text_dim]``."""
        return self.tok_emb(ids) + self.pos_emb[: ids.shape[1]]

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        context: torch.Tensor,
        hook: Optional[AttentionHook] = None,
    ) -> torch.Tensor:
        B = z.shape[0]
        if t.dim() == 0:
            t = t.expand(B)
        temb = self.time_mlp(timestep_embedding(t, self.arch.channels[0]).to(z.dtype))
        x = torch.cat([z, self.coords.to(z.dtype).expand(B, -1, -1, -1)], dim=1)
        h1 = self.res32a(self.conv_in(x), temb)
        h2 = self.attn_down16(self.res16a(self.down1(h1), temb), context, hook)
        m = self.res8a(self.down2(h2), temb)
        m = self.res8b(self.attn_mid8(m, context, hook), temb)
        u = self.up1(F.interpolate(m, scale_factor=2, mode="nearest"))
        u = self.attn_up16(self.res16b(torch.cat([u, h2], 1), temb), context, hook)
        u = self.up2(F.interpolate(u, scale_factor=2, mode="nearest"))
        u = self.res32b(torch.cat([u, h1], 1), temb)
        return self.conv_out(F.silu(self.norm_out(u)))
