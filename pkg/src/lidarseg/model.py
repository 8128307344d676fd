"""Network configuration presets and the assembled segmentation network."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import SegmentationBackbone
from .errors import ConfigError
from .group_encoder import GroupEncoder
from .grouping import AUGMENTED_CHANNELS, RAW_CHANNELS


@dataclass(frozen=True)
class ModelConfig:
    """Channel plan (c3..c6), backbone depth plan (l1..l4) and feature toggles."""

    c3: int
    c4: int
    c5: int
    c6: int
    l1: int
    l2: int
    l3: int
    l4: int
    num_classes: int
    preset: str = "custom"
    use_local: bool = True
    use_context: bool = True
    use_attention: bool = True
    use_relative_features: bool = True
    leaky_slope: float = 0.01
    pad_mode: str = "zeros"  # "zeros" | "circular_w" for horizontal wraparound

    def __post_init__(self):
        if min(self.c3, self.c4, self.c5, self.c6) < 1 or min(self.l1, self.l2, self.l3, self.l4) < 0:
            raise ConfigError("channel counts must be >= 1 and layer counts >= 0")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.use_context and not self.use_local:
            raise ConfigError("the context extractor taps the local extractor; enable use_local")

    @property
    def in_channels(self) -> int:
        return AUGMENTED_CHANNELS if self.use_relative_features else RAW_CHANNELS

    @property
    def fused_channels(self) -> int:
        """Concatenated width: spatial (c5) + local max (c5) + context (3*c4)."""
        c7 = self.c5
        if self.use_local:
            c7 += self.c5
        if self.use_context:
            c7 += 3 * self.c4
        return c7


_PRESETS = {
    "full": dict(c3=24, c4=48, c5=96, c6=192, l1=50, l2=30, l3=4, l4=2),
    "small": dict(c3=16, c4=32, c5=64, c6=128, l1=24, l2=20, l3=2, l4=1),
    "tiny": dict(c3=12, c4=24, c5=48, c6=96, l1=14, l2=10, l3=2, l4=1),
}


def preset_config(name: str, num_classes: int = 19, **overrides) -> ModelConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return ModelConfig(num_classes=num_classes, preset=name, **{**_PRESETS[name], **overrides})


class SegmentationNetwork:
    """Group encoder + FCNN backbone; maps point groups and the raw range image
    to per-pixel class logits at full resolution."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = GroupEncoder(cfg, rng=rng, dtype=dtype)
        self.backbone = SegmentationBackbone(cfg, rng=rng, dtype=dtype)

    # nn.Module-style surface over the two halves
    def modules(self):
        yield from self.encoder.modules()
        yield from self.backbone.modules()

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.backbone.named_parameters("backbone.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        yield from self.encoder.named_buffers("encoder.")
        yield from self.backbone.named_buffers("backbone.")

    def train(self):
        self.encoder.train()
        self.backbone.train()
        return self

    def eval(self):
        self.encoder.eval()
        self.backbone.eval()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def count_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data[...] = np.asarray(state[name], dtype=p.data.dtype).reshape(p.data.shape)
        for name, b in self.named_buffers():
            b[...] = np.asarray(state[name], dtype=b.dtype).reshape(b.shape)

    def forward(self, groups: Tensor | np.ndarray, image: Tensor | np.ndarray) -> Tensor:
        """groups: (B, Cin, N, P); image: (B, 5, H, W) -> logits (B, Nc, H, W)."""
        if not isinstance(groups, Tensor):
            groups = Tensor(groups)
        if not isinstance(image, Tensor):
            image = Tensor(image)
        B, _, H, W = image.data.shape
        if H % 8 or W % 8:
            raise ConfigError(f"image dimensions must be divisible by 8, got {W}x{H}")
        grid = (H // 4, W // 4)
        rep = self.encoder(groups, grid)
        return self.backbone(rep, image)

    __call__ = forward


def count_parameters(model) -> int:
    """Sum of learnable element counts (BN gamma/beta included, buffers excluded)."""
    return sum(p.data.size for p in model.parameters())
