"""Layer abstractions on top of the autodiff engine.

Modules own named parameters (trainable tensors) and buffers (running
statistics). Names are hierarchical dotted paths and enumerate in a fixed,
deterministic order, which the checkpoint format relies on.
"""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"LSEGCKPT"
CHECKPOINT_VERSION = 1


class Module:
    """Base class: tracks parameters, buffers and submodules by attribute order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    # registration -----------------------------------------------------------
    def register_parameter(self, name: str, value: Tensor) -> Tensor:
        value.requires_grad = True
        self._params[name] = value
        return value

    def register_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = value
        return value

    # traversal --------------------------------------------------------------
    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children():
            yield from child.named_buffers(prefix + cname + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    # mode -------------------------------------------------------------------
    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def count_parameters(self) -> int:
        """Total learnable scalar count (buffers such as running stats excluded)."""
        return sum(p.data.size for p in self.parameters())

    # state ------------------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data[...] = arr
        for name, b in self.named_buffers():
            arr = np.asarray(state[name], dtype=b.dtype)
            if arr.shape != b.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {b.shape}")
            b[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _init_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    """Strided/dilated/grouped 2D convolution; kernel may be rectangular."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size,
        stride=1,
        padding=0,
        dilation=1,
        groups: int = 1,
        bias: bool = True,
        pad_mode: str = "zeros",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        self.pad_mode = pad_mode
        fan_in = (in_channels // groups) * kh * kw
        self.weight = self.register_parameter(
            "weight", Tensor(_init_uniform(rng, (out_channels, in_channels // groups, kh, kw), fan_in, dtype))
        )
        self.bias = self.register_parameter("bias", Tensor(np.zeros(out_channels, dtype=dtype))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.groups,
            pad_mode=self.pad_mode,
        )


class BatchNorm(Module):
    """Per-channel normalization over every non-channel axis (channel axis 1).

    Train mode uses batch statistics and updates running stats with the given
    momentum; eval mode uses the running stats.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.register_parameter("gamma", Tensor(np.ones(num_features, dtype=dtype)))
        self.beta = self.register_parameter("beta", Tensor(np.zeros(num_features, dtype=dtype)))
        self.running_mean = self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.running_var = self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x: Tensor, slope: float | None = None) -> Tensor:
        """Normalize ``x``; a LeakyReLU with negative ``slope`` may be fused on top."""
        if x.data.shape[1] != self.num_features:
            raise ValueError(f"batchnorm expects {self.num_features} channels, got {x.data.shape}")
        out, mu, var = ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            eps=self.eps,
            training=self.training,
            running_mean=self.running_mean,
            running_var=self.running_var,
            slope=slope,
        )
        if self.training:
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu.astype(self.running_mean.dtype)
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var.astype(self.running_var.dtype)
        return out


class ConvBNAct(Module):
    """Conv2d -> BatchNorm -> LeakyReLU."""

    def __init__(self, in_ch, out_ch, kernel_size, slope: float = 0.01, **conv_kwargs):
        super().__init__()
        dtype = conv_kwargs.pop("dtype", np.float32)
        self.conv = Conv2d(in_ch, out_ch, kernel_size, bias=False, dtype=dtype, **conv_kwargs)
        self.bn = BatchNorm(out_ch, dtype=dtype)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x), slope=self.slope)


class SeparableConv(Module):
    """Depthwise 3x3 and pointwise 1x1, each followed by BN + LeakyReLU."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        stride: int = 1,
        slope: float = 0.01,
        pad_mode: str = "zeros",
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        self.depthwise = Conv2d(
            in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch, bias=False,
            pad_mode=pad_mode, rng=rng, dtype=dtype,
        )
        self.bn_dw = BatchNorm(in_ch, dtype=dtype)
        self.pointwise = Conv2d(in_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm(out_ch, dtype=dtype)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn_dw(self.depthwise(x), slope=self.slope)
        return self.bn(self.pointwise(h), slope=self.slope)


class MultiDilationSeparableConv(Module):
    """Depthwise branches at dilation 1 and r summed, then pointwise, BN, LeakyReLU."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        dilation: int,
        slope: float = 0.01,
        pad_mode: str = "zeros",
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        self.dilation = dilation
        self.depthwise_local = Conv2d(
            in_ch, in_ch, 3, padding=1, groups=in_ch, bias=False, pad_mode=pad_mode, rng=rng, dtype=dtype
        )
        self.depthwise_dilated = Conv2d(
            in_ch, in_ch, 3, padding=dilation, dilation=dilation, groups=in_ch, bias=False,
            pad_mode=pad_mode, rng=rng, dtype=dtype,
        )
        self.bn_dw = BatchNorm(in_ch, dtype=dtype)
        self.pointwise = Conv2d(in_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm(out_ch, dtype=dtype)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        y = ad.add(self.depthwise_local(x), self.depthwise_dilated(x))
        y = self.bn_dw(y, slope=self.slope)
        return self.bn(self.pointwise(y), slope=self.slope)


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(path, model: Module, epoch: int = 0):
    """Binary checkpoint: versioned header + (name, shape, float32 payload) records."""
    records = list(model.named_parameters())
    records += [(name, buf) for name, buf in model.named_buffers()]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, int(epoch), len(records)))
        for name, value in records:
            arr = value.data if isinstance(value, Tensor) else value
            payload = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", payload.ndim))
            f.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            f.write(payload.tobytes())


def load_checkpoint(path, model: Module) -> int:
    """Load a checkpoint saved by :func:`save_checkpoint`; returns the stored epoch."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, epoch, n = struct.unpack("<III", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        state: dict[str, np.ndarray] = {}
        for _ in range(n):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            state[name] = data
    model.load_state_dict(state)
    return epoch
