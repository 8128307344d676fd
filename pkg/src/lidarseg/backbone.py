"""Encoder/decoder FCNN turning the learned (H/4, W/4, c6) representation into
full-resolution class logits.

Encoder: one stride-2 separable conv down to 1/8 resolution, l1 separable conv
layers, then l2 multi-dilation separable layers whose dilation schedule cycles
1, 2, 4, 8 (capped so the dilated kernel fits the feature map). Decoder:
bilinear x2 -> l3 separable layers at quarter resolution -> bilinear x2 ->
addition of fine-grained branch features -> l4 layers at half resolution ->
bilinear x2 -> one 3x3 conv to the class logits. The branch maps the raw
5-channel range image to half resolution with three separable convs (the first
stride 2) and a 1x1 projection to the decoder width.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Conv2d, Module, MultiDilationSeparableConv, SeparableConv

_DILATION_CYCLE = (1, 2, 4, 8)
IMAGE_CHANNELS = 5


class SegmentationBackbone(Module):
    def __init__(self, cfg, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c6, slope, pad_mode = cfg.c6, cfg.leaky_slope, cfg.pad_mode
        sep = dict(slope=slope, pad_mode=pad_mode, rng=rng, dtype=dtype)

        self.down = SeparableConv(c6, c6, stride=2, **sep)
        self.enc_plain = [SeparableConv(c6, c6, **sep) for _ in range(cfg.l1)]
        self.enc_dilated = [
            MultiDilationSeparableConv(c6, c6, dilation=_DILATION_CYCLE[i % len(_DILATION_CYCLE)], **sep)
            for i in range(cfg.l2)
        ]
        self.dec_quarter = [SeparableConv(c6, c6, **sep) for _ in range(cfg.l3)]
        self.dec_half = [SeparableConv(c6, c6, **sep) for _ in range(cfg.l4)]
        self.classifier = Conv2d(c6, cfg.num_classes, 3, padding=1, pad_mode=pad_mode, rng=rng, dtype=dtype)

        branch_ch = max(1, c6 // 4)
        self.branch = [
            SeparableConv(IMAGE_CHANNELS, branch_ch, stride=2, **sep),
            SeparableConv(branch_ch, branch_ch, **sep),
            SeparableConv(branch_ch, branch_ch, **sep),
        ]
        self.branch_proj = Conv2d(branch_ch, c6, 1, rng=rng, dtype=dtype)

    @staticmethod
    def _cap_dilation(layer: MultiDilationSeparableConv, h: int, w: int) -> int:
        limit = max(1, (min(h, w) - 1) // 2)
        return min(layer.dilation, limit)

    def forward(self, rep: Tensor, image: Tensor) -> Tensor:
        """rep: (B, c6, H/4, W/4); image: (B, 5, H, W) -> (B, Nc, H, W)."""
        B, _, H, W = image.data.shape
        if rep.data.shape[2] * 4 != H or rep.data.shape[3] * 4 != W:
            raise ConfigError(
                f"representation {rep.data.shape} does not match image {image.data.shape}"
            )

        h = self.down(rep)  # 1/8 resolution
        for layer in self.enc_plain:
            h = layer(h)
        fh, fw = h.data.shape[2], h.data.shape[3]
        for layer in self.enc_dilated:
            d = self._cap_dilation(layer, fh, fw)
            if d != layer.dilation:
                h = self._dilated_forward(layer, h, d)
            else:
                h = layer(h)

        h = ad.bilinear_upsample(h)  # 1/4
        for layer in self.dec_quarter:
            h = layer(h)
        h = ad.bilinear_upsample(h)  # 1/2

        b = image
        for layer in self.branch:
            b = layer(b)
        h = ad.add(h, self.branch_proj(b))
        for layer in self.dec_half:
            h = layer(h)

        h = ad.bilinear_upsample(h)  # full resolution
        return self.classifier(h)

    def _dilated_forward(self, layer: MultiDilationSeparableConv, x: Tensor, d: int) -> Tensor:
        y = ad.add(
            layer.depthwise_local(x),
            ad.conv2d(
                x,
                layer.depthwise_dilated.weight,
                None,
                padding=d,
                dilation=d,
                groups=x.data.shape[1],
                pad_mode=layer.depthwise_dilated.pad_mode,
            ),
        )
        y = layer.bn_dw(y, slope=layer.slope)
        return layer.bn(layer.pointwise(y), slope=layer.slope)
