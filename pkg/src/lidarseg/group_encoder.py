"""Learned 2D representation from point groups.

Three feature paths over a (B, C_in, N, P) group tensor:

  local   - four shared 1x1 conv layers (C_in -> c3 -> c4 -> c4 -> c5), each
            BN + LeakyReLU, applied per slot; the final output is max-reduced
            over the N slots, the second layer's output feeds the context path
  context - the layer-2 tap is max-reduced over N to one descriptor per group,
            laid out on the (H/4, W/4) grid; 3x3 neighborhoods at dilations
            1/2/3 (zero padded, stride 1) are gathered, a shared linear
            (c4 -> c4) + BN + LeakyReLU is applied per gathered slot and each
            branch max-reduces over its 9 slots
  spatial - one convolution spanning the whole N axis (kernel N x 1,
            C_in -> c5) + BN + LeakyReLU; alone, this is equivalent to a plain
            strided convolution on the spherical projection and serves as the
            ablation baseline

The paths concatenate to c7 channels on the (H/4, W/4) grid, pass through a
squeeze-style attention gate (global average pool, 1x1 conv, sigmoid,
broadcast multiply) and a 1x1 bottleneck down to c6 channels.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import BatchNorm, Conv2d, ConvBNAct, Module

_CONTEXT_DILATIONS = (1, 2, 3)


class GroupEncoder(Module):
    def __init__(self, cfg, group_size: int = 16, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.group_size = group_size
        slope = cfg.leaky_slope
        cin = cfg.in_channels

        if cfg.use_local:
            widths = [cin, cfg.c3, cfg.c4, cfg.c4, cfg.c5]
            self.local_layers = [
                ConvBNAct(widths[i], widths[i + 1], 1, slope=slope, rng=rng, dtype=dtype) for i in range(4)
            ]
        if cfg.use_context:
            self.context_branches = [
                ConvBNAct(cfg.c4, cfg.c4, 1, slope=slope, rng=rng, dtype=dtype) for _ in _CONTEXT_DILATIONS
            ]
        self.spatial_conv = Conv2d(cin, cfg.c5, (group_size, 1), rng=rng, dtype=dtype)
        self.spatial_bn = BatchNorm(cfg.c5, dtype=dtype)

        c7 = cfg.fused_channels
        if cfg.use_attention:
            self.attention = Conv2d(c7, c7, 1, rng=rng, dtype=dtype)
        self.bottleneck = ConvBNAct(c7, cfg.c6, 1, slope=slope, rng=rng, dtype=dtype)

    def local_features(self, groups: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (layer-2 tap, layer-4 output), both (B, c, N, P)."""
        h = groups
        outs = []
        for layer in self.local_layers:
            h = layer(h)
            outs.append(h)
        return outs[1], outs[3]

    def context_features(self, tap2: Tensor, grid: tuple[int, int]) -> Tensor:
        """(B, c4, N, P) tap -> (B, 3*c4, rows, cols) context tensor."""
        rows, cols = grid
        desc = ad.amax(tap2, axis=2)  # (B, c4, P), PointNet-style reduction
        B, c4, P = desc.data.shape
        desc = ad.reshape(desc, (B, c4, rows, cols))
        branches = []
        for branch, d in zip(self.context_branches, _CONTEXT_DILATIONS):
            gathered = ad.neighbor_stack(desc, k=3, dilation=d, pad_mode=self.cfg.pad_mode)
            out = branch(gathered)  # shared linear per gathered slot
            out = ad.amax(out, axis=2)  # (B, c4, rows*cols)
            branches.append(ad.reshape(out, (B, c4, rows, cols)))
        return ad.concat(branches, axis=1)

    def spatial_features(self, groups: Tensor) -> Tensor:
        """(B, C_in, N, P) -> (B, c5, 1, P) via a kernel spanning the N axis."""
        if groups.data.shape[2] != self.group_size:
            raise ValueError(f"encoder built for N={self.group_size}, got N={groups.data.shape[2]}")
        h = self.spatial_conv(groups)
        return self.spatial_bn(h, slope=self.cfg.leaky_slope)

    def forward(self, groups: Tensor, grid: tuple[int, int]) -> Tensor:
        """groups: (B, C_in, N, P) with P == rows*cols -> (B, c6, rows, cols)."""
        rows, cols = grid
        B, _, _, P = groups.data.shape
        if P != rows * cols:
            raise ValueError(f"group count {P} does not factor to grid {rows}x{cols}")
        parts = []
        spatial = self.spatial_features(groups)  # (B, c5, 1, P)
        parts.append(ad.reshape(spatial, (B, self.cfg.c5, rows, cols)))
        if self.cfg.use_local:
            tap2, feat4 = self.local_features(groups)
            local_max = ad.amax(feat4, axis=2)  # max over N
            parts.append(ad.reshape(local_max, (B, self.cfg.c5, rows, cols)))
            if self.cfg.use_context:
                parts.append(self.context_features(tap2, grid))
        fused = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        if self.cfg.use_attention:
            pooled = ad.mean(fused, axis=(2, 3), keepdims=True)
            gate = ad.sigmoid(self.attention(pooled))
            fused = ad.mul(fused, gate)
        return self.bottleneck(fused)
