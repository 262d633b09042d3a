"""Layers and parameter containers built on the functional ops.

A ``Module`` owns named parameters (trainable tensors) and buffers
(non-trainable state such as running statistics); both are discovered by
walking attributes, including lists of submodules, so checkpointing gets
stable hierarchical names like ``encoders.1.blocks.0.conv1.w``.
"""

from __future__ import annotations

import numpy as np

from ..rng import make_rng
from . import functional as F
from .tensor import Tensor, memory_meter, parameter


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Tensor, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        buffers = getattr(self, "_buffers", {})
        for name in buffers:
            yield f"{prefix}{name}", buffers[name]
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if not hasattr(self, "_buffers"):
            self._buffers: dict[str, np.ndarray] = {}
        self._buffers[name] = value

    def get_buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own_params = dict(self.named_parameters())
        own_buffers = dict(self.named_buffers())
        missing = (set(own_params) | set(own_buffers)) - set(state)
        extra = set(state) - (set(own_params) | set(own_buffers))
        if missing or extra:
            raise ValueError(
                f"state mismatch; missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}"
            )
        for name, p in own_params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = memory_meter.track(np.ascontiguousarray(arr))
        self._assign_buffers(state)

    def _assign_buffers(self, state, prefix: str = "") -> None:
        buffers = getattr(self, "_buffers", {})
        for name in buffers:
            buffers[name] = np.ascontiguousarray(state[f"{prefix}{name}"], dtype=buffers[name].dtype)
        for name, value in self._children():
            if isinstance(value, Module):
                value._assign_buffers(state, f"{prefix}{name}.")

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Dense(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32, zero_init: bool = False,
                 bias: bool = True, bias_init: float = 0.0):
        rng = make_rng(rng)
        if zero_init:
            w = np.zeros((cin, cout), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (cin, cout), cin, dtype)
        self.w = parameter(w)
        self.b = parameter(np.full(cout, bias_init, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.matmul(x, self.w)
        if self.b is not None:
            out = F.add(out, self.b)
        return out


class Conv3d(Module):
    """Channels-last 3D convolution with cubic kernels."""

    def __init__(self, cin: int, cout: int, k: int = 3, rng=None, dtype=np.float32,
                 stride: int = 1, padding: int | None = None, zero_init: bool = False,
                 bias: bool = True):
        rng = make_rng(rng)
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding  # default keeps size at stride 1
        if zero_init:
            w = np.zeros((k, k, k, cin, cout), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (k, k, k, cin, cout), cin * k**3, dtype)
        self.w = parameter(w)
        self.b = parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.conv3d(x, self.w, stride=self.stride, padding=self.padding)
        if self.b is not None:
            out = F.add(out, self.b)
        return out


class BatchNorm(Module):
    """Per-channel standardization with a learnable affine and running stats.

    Channels are the last axis; statistics pool every other axis. Training
    mode requires a leading (batch) extent of at least 2.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(channels, dtype=dtype))
        self.beta = parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def _standardize(self, x: Tensor, training: bool) -> Tensor:
        if training:
            if x.data.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in training mode")
            xhat, mean, var = F.batch_standardize(x, self.eps)
            m = self.momentum
            buf = self._buffers
            buf["running_mean"] = ((1 - m) * buf["running_mean"] + m * mean).astype(
                buf["running_mean"].dtype
            )
            buf["running_var"] = ((1 - m) * buf["running_var"] + m * var).astype(
                buf["running_var"].dtype
            )
            return xhat
        mean = self.get_buffer("running_mean").astype(x.data.dtype)
        var = self.get_buffer("running_var").astype(x.data.dtype)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.data.dtype)
        return F.add(F.mul(x, Tensor(inv)), Tensor(-mean * inv))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return F.add(F.mul(self._standardize(x, training), self.gamma), self.beta)


class ConditionalBatchNorm(Module):
    """Batch normalization whose affine comes from a conditioning vector.

    Two small dense stacks (two layers, leaky ReLU after the first) map the
    condition to per-channel gamma and beta, one pair per batch element. The
    final layers start at zero weights with biases (1, 0), so a fresh network
    behaves exactly like unconditioned batch norm with a unit affine.
    """

    def __init__(self, channels: int, cond_dim: int, rng, hidden: int | None = None,
                 eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        rng = make_rng(rng)
        hidden = hidden or channels
        self.eps = eps
        self.momentum = momentum
        self.gamma_stack = [
            Dense(cond_dim, hidden, rng, dtype),
            Dense(hidden, channels, rng, dtype, zero_init=True, bias_init=1.0),
        ]
        self.beta_stack = [
            Dense(cond_dim, hidden, rng, dtype),
            Dense(hidden, channels, rng, dtype, zero_init=True, bias_init=0.0),
        ]
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def _affine_from(self, cond: Tensor, stack) -> Tensor:
        h = F.leaky_relu(stack[0](cond))
        return stack[1](h)

    def __call__(self, x: Tensor, cond: Tensor, training: bool = False) -> Tensor:
        if training:
            if x.data.shape[0] < 2:
                raise ValueError("batch normalization needs batch size >= 2 in training mode")
            xhat, mean, var = F.batch_standardize(x, self.eps)
            m = self.momentum
            buf = self._buffers
            buf["running_mean"] = ((1 - m) * buf["running_mean"] + m * mean).astype(
                buf["running_mean"].dtype
            )
            buf["running_var"] = ((1 - m) * buf["running_var"] + m * var).astype(
                buf["running_var"].dtype
            )
        else:
            mean = self.get_buffer("running_mean").astype(x.data.dtype)
            var = self.get_buffer("running_var").astype(x.data.dtype)
            inv = (1.0 / np.sqrt(var + self.eps)).astype(x.data.dtype)
            xhat = F.add(F.mul(x, Tensor(inv)), Tensor(-mean * inv))
        gamma = self._affine_from(cond, self.gamma_stack)  # (B, C)
        beta = self._affine_from(cond, self.beta_stack)
        # broadcast one (gamma, beta) pair per batch element across middle axes
        shape = (x.data.shape[0],) + (1,) * (x.data.ndim - 2) + (gamma.data.shape[-1],)
        gamma = F.reshape(gamma, shape)
        beta = F.reshape(beta, shape)
        return F.add(F.mul(xhat, gamma), beta)


class ResidualBlockFC(Module):
    """Pre-activation fully connected residual block: (norm, act, dense) x 2 + skip."""

    def __init__(self, cin: int, cout: int, rng, activation=F.leaky_relu,
                 cond_dim: int | None = None, dtype=np.float32):
        rng = make_rng(rng)
        self.activation = activation
        norm = (
            (lambda c: ConditionalBatchNorm(c, cond_dim, rng, dtype=dtype))
            if cond_dim
            else (lambda c: BatchNorm(c, dtype=dtype))
        )
        self.norm1 = norm(cin)
        # no bias on dense1: its output feeds a standardizer, which cancels shifts
        self.dense1 = Dense(cin, cout, rng, dtype, bias=False)
        self.norm2 = norm(cout)
        self.dense2 = Dense(cout, cout, rng, dtype)
        self.proj = Dense(cin, cout, rng, dtype, bias=False) if cin != cout else None

    def __call__(self, x: Tensor, cond: Tensor | None = None, training: bool = False) -> Tensor:
        def normed(norm, t):
            return norm(t, cond, training) if isinstance(norm, ConditionalBatchNorm) else norm(t, training)

        h = self.dense1(self.activation(normed(self.norm1, x)))
        h = self.dense2(self.activation(normed(self.norm2, h)))
        skip = self.proj(x) if self.proj is not None else x
        return F.add(skip, h)


class ResidualBlockConv3d(Module):
    """Pre-activation convolutional residual block with 3x3x3 kernels."""

    def __init__(self, cin: int, cout: int, rng, activation=F.selu, dtype=np.float32):
        rng = make_rng(rng)
        self.activation = activation
        self.norm1 = BatchNorm(cin, dtype=dtype)
        # conv1 feeds a standardizer, so a bias would be a dead parameter
        self.conv1 = Conv3d(cin, cout, 3, rng, dtype, bias=False)
        self.norm2 = BatchNorm(cout, dtype=dtype)
        self.conv2 = Conv3d(cout, cout, 3, rng, dtype)
        self.proj = Conv3d(cin, cout, 1, rng, dtype, bias=False) if cin != cout else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        h = self.conv1(self.activation(self.norm1(x, training)))
        h = self.conv2(self.activation(self.norm2(h, training)))
        skip = self.proj(x) if self.proj is not None else x
        return F.add(skip, h)
