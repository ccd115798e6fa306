"""Minimal single-precision conv/dense engine with manual backprop.

Child networks are compiled from an ArchitectureEncoding into a flat layer
list: stem 3x3 conv -> blocks -> global average pool -> linear head. All
convolutions are stride 1 with "same" zero padding; spatial reduction only
happens in the pooling layer. No batch norm, so per-row outputs are
independent of the rest of the batch.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, StateError
from .search_space import ArchitectureEncoding, BlockType

DTYPE = np.float32


def _check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values after {where}")
    return x


def _fan_in_uniform(rng, shape, fan_in, dtype) -> np.ndarray:
    # bound sqrt(6/fan_in) keeps activation variance stable through
    # ReLU chains (deep stacks collapse to zero signal otherwise)
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Forward/backward unit with named parameters and gradient slots."""

    name = "layer"

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def gradients(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Stride-1 same-padding convolution via im2col."""

    def __init__(self, name, in_ch, out_ch, kernel, rng, dtype=DTYPE):
        self.name = name
        self.dtype = dtype
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        fan_in = in_ch * kernel * kernel
        self.w = _fan_in_uniform(rng, (out_ch, fan_in), fan_in, dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._win = None
        self._in_shape = None

    def parameters(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def gradients(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
        self._win = np.ascontiguousarray(cols, dtype=self.dtype)
        self._in_shape = x.shape
        y = self._win @ self.w.T + self.b
        return y.reshape(n, h, w, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, dy):
        if self._win is None:
            raise StateError(f"{self.name}: backward before forward")
        n, c, h, w = self._in_shape
        k = self.kernel
        p = k // 2
        dy_flat = dy.transpose(0, 2, 3, 1).reshape(n * h * w, self.out_ch)
        self.dw = (dy_flat.T @ self._win).astype(self.dtype)
        self.db = dy_flat.sum(axis=0, dtype=np.float64).astype(self.dtype)
        dcols = (dy_flat @ self.w).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=self.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        self._win = None
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class DepthwiseConv2d(Layer):
    """Stride-1 same-padding depthwise convolution (one filter per channel)."""

    def __init__(self, name, channels, kernel, rng, dtype=DTYPE):
        self.name = name
        self.dtype = dtype
        self.channels = channels
        self.kernel = kernel
        fan_in = kernel * kernel
        self.w = _fan_in_uniform(rng, (channels, kernel, kernel), fan_in, dtype)
        self.b = np.zeros(channels, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._win = None
        self._in_shape = None

    def parameters(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def gradients(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.kernel
        p = k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (n, c, h, w, k, k) patches
        self._win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3)).astype(self.dtype)
        self._in_shape = x.shape
        y = np.einsum("nchwij,cij->nchw", self._win, self.w)
        return y + self.b[None, :, None, None]

    def backward(self, dy):
        if self._win is None:
            raise StateError(f"{self.name}: backward before forward")
        n, c, h, w = self._in_shape
        k = self.kernel
        p = k // 2
        self.dw = np.einsum("nchw,nchwij->cij", dy, self._win).astype(self.dtype)
        self.db = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(self.dtype)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=self.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + w] += dy * self.w[None, :, i, j, None, None]
        self._win = None
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class ReLU(Layer):
    def __init__(self, name):
        self.name = name
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dy):
        if self._mask is None:
            raise StateError(f"{self.name}: backward before forward")
        dx = np.where(self._mask, dy, 0).astype(dy.dtype)
        self._mask = None
        return dx


class GlobalAvgPool(Layer):
    """(n, c, h, w) -> (n, c) spatial mean."""

    def __init__(self, name):
        self.name = name
        self._in_shape = None

    def forward(self, x):
        self._in_shape = x.shape
        return x.mean(axis=(2, 3), dtype=x.dtype)

    def backward(self, dy):
        if self._in_shape is None:
            raise StateError(f"{self.name}: backward before forward")
        n, c, h, w = self._in_shape
        dx = np.broadcast_to(dy[:, :, None, None] / (h * w), self._in_shape).astype(dy.dtype)
        self._in_shape = None
        return dx


class Linear(Layer):
    def __init__(self, name, in_dim, out_dim, rng, dtype=DTYPE, zero_init=False):
        self.name = name
        self.dtype = dtype
        if zero_init:
            # starting the classifier at exactly uniform logits keeps the
            # first optimizer steps small under the summed batch loss
            self.w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            self.w = _fan_in_uniform(rng, (out_dim, in_dim), in_dim, dtype)
        self.b = np.zeros(out_dim, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def parameters(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}

    def gradients(self):
        return {f"{self.name}.w": self.dw, f"{self.name}.b": self.db}

    def forward(self, x):
        self._x = x
        return x @ self.w.T + self.b

    def backward(self, dy):
        if self._x is None:
            raise StateError(f"{self.name}: backward before forward")
        self.dw = (dy.T @ self._x).astype(self.dtype)
        self.db = dy.sum(axis=0, dtype=np.float64).astype(self.dtype)
        dx = (dy @ self.w).astype(self.dtype)
        self._x = None
        return dx


class Sequential(Layer):
    def __init__(self, name, layers):
        self.name = name
        self.layers = layers

    def parameters(self):
        out = {}
        for l in self.layers:
            out.update(l.parameters())
        return out

    def gradients(self):
        out = {}
        for l in self.layers:
            out.update(l.gradients())
        return out

    def forward(self, x):
        for l in self.layers:
            x = _check_finite(l.forward(x), l.name)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy


class Residual(Layer):
    """y = body(x) + shortcut(x); shortcut is identity when None."""

    def __init__(self, name, body: Sequential, shortcut: Layer | None = None, post=None):
        self.name = name
        self.body = body
        self.shortcut = shortcut
        self.post = post  # optional activation applied after the add

    def parameters(self):
        out = dict(self.body.parameters())
        if self.shortcut is not None:
            out.update(self.shortcut.parameters())
        return out

    def gradients(self):
        out = dict(self.body.gradients())
        if self.shortcut is not None:
            out.update(self.shortcut.gradients())
        return out

    def forward(self, x):
        y = self.body.forward(x)
        s = x if self.shortcut is None else self.shortcut.forward(x)
        out = y + s
        if self.post is not None:
            out = self.post.forward(out)
        return out

    def backward(self, dy):
        if self.post is not None:
            dy = self.post.backward(dy)
        dx = self.body.backward(dy)
        if self.shortcut is None:
            dx = dx + dy
        else:
            dx = dx + self.shortcut.backward(dy)
        return dx


class Identity(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, x):
        return x

    def backward(self, dy):
        return dy


def _compile_block(block, ch1, idx, rng, dtype) -> Layer:
    t = block.block_type
    name = f"block{idx}.{t.value}"
    if t is BlockType.SKIP:
        return Identity(name)
    if t is BlockType.CB:
        return Sequential(name, [
            Conv2d(f"{name}.conv1", ch1, block.ch2, block.kernel, rng, dtype),
            ReLU(f"{name}.relu1"),
            Conv2d(f"{name}.conv2", block.ch2, block.ch3, block.kernel, rng, dtype),
            ReLU(f"{name}.relu2"),
        ])
    if t is BlockType.RB:
        body = Sequential(f"{name}.body", [
            Conv2d(f"{name}.conv1", ch1, block.ch2, block.kernel, rng, dtype),
            ReLU(f"{name}.relu1"),
            Conv2d(f"{name}.conv2", block.ch2, block.ch3, block.kernel, rng, dtype),
        ])
        shortcut = None if ch1 == block.ch3 else Conv2d(f"{name}.proj", ch1, block.ch3, 1, rng, dtype)
        return Residual(name, body, shortcut, post=ReLU(f"{name}.relu2"))
    if t is BlockType.MB:
        body = Sequential(f"{name}.body", [
            Conv2d(f"{name}.expand", ch1, block.ch2, 1, rng, dtype),
            ReLU(f"{name}.relu1"),
            DepthwiseConv2d(f"{name}.dw", block.ch2, block.kernel, rng, dtype),
            ReLU(f"{name}.relu2"),
            Conv2d(f"{name}.project", block.ch2, block.ch3, 1, rng, dtype),
        ])
        if ch1 == block.ch3:
            return Residual(name, body, shortcut=None, post=None)
        return body
    if t is BlockType.DB:
        return Sequential(name, [
            DepthwiseConv2d(f"{name}.dw", ch1, block.kernel, rng, dtype),
            ReLU(f"{name}.relu1"),
            Conv2d(f"{name}.project", ch1, block.ch3, 1, rng, dtype),
        ])
    raise NumericError(f"unreachable block type {t}")


class ChildNetwork:
    """A compiled, trainable realization of one ArchitectureEncoding."""

    def __init__(
        self,
        encoding: ArchitectureEncoding,
        input_shape: tuple[int, int, int],
        seed: int,
        dtype=DTYPE,
    ):
        self.encoding = encoding
        self.input_shape = tuple(input_shape)  # (C, S, S)
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        c_in = input_shape[0]
        layers: list[Layer] = [
            Conv2d("stem", c_in, encoding.stem_channels, 3, rng, dtype),
            ReLU("stem.relu"),
        ]
        for idx, (block, ch1) in enumerate(zip(encoding.blocks, encoding.input_channels())):
            layers.append(_compile_block(block, ch1, idx, rng, dtype))
        layers.append(GlobalAvgPool("gap"))
        layers.append(
            Linear("head", encoding.out_channels, encoding.num_classes, rng, dtype, zero_init=True)
        )
        self.net = Sequential("child", layers)

    def parameters(self) -> dict[str, np.ndarray]:
        return self.net.parameters()

    def gradients(self) -> dict[str, np.ndarray]:
        return self.net.gradients()

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def forward(self, batch: np.ndarray) -> np.ndarray:
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise NumericError(
                f"batch shape {batch.shape} incompatible with input {self.input_shape}"
            )
        return self.net.forward(batch.astype(self.dtype, copy=False))

    def backward(self, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        self.net.backward(loss_grad.astype(self.dtype, copy=False))
        return self.gradients()

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, v in values.items():
            params[name][...] = v


def compile_network(enc: ArchitectureEncoding, input_shape, seed: int, dtype=DTYPE) -> ChildNetwork:
    return ChildNetwork(enc, input_shape, seed, dtype)


def sgd_step(net: ChildNetwork, grads: dict[str, np.ndarray], lr: float) -> None:
    params = net.parameters()
    for name, g in grads.items():
        params[name] -= net.dtype(lr) * g


def save_snapshot(net: ChildNetwork, path) -> None:
    from .search_space import encoding_text

    np.savez(path, __encoding__=np.array(encoding_text(net.encoding)), **net.parameters())


def load_snapshot(net: ChildNetwork, path) -> None:
    from .errors import CheckpointError
    from .search_space import encoding_text

    with np.load(path) as data:
        stored = str(data["__encoding__"])
        if stored != encoding_text(net.encoding):
            raise CheckpointError("snapshot encoding does not match the compiled network")
        net.set_parameters({k: data[k] for k in data.files if k != "__encoding__"})
