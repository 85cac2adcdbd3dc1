"""U-shaped encoder-decoder shared by the global and local stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .heatmap import Frame, HeatmapStack
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    kernel_size: int = 3
    out_channels: int = 20
    in_channels: int = 1

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid u-net config {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.out_channels < 2:
            raise ValueError("out_channels must be K + 1 >= 2")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def layer_shapes(self) -> list[tuple[str, tuple[int, int, int, int]]]:
        """(name prefix, kernel shape) for every convolution, in creation order."""
        k, b = self.kernel_size, self.base_channels
        layers = []
        cin = self.in_channels
        for lvl in range(self.depth):
            cout = b * 2 ** lvl
            layers.append((f"enc{lvl}.conv1", (cout, cin, k, k)))
            layers.append((f"enc{lvl}.conv2", (cout, cout, k, k)))
            cin = cout
        cout = b * 2 ** self.depth
        layers.append(("bottleneck.conv1", (cout, cin, k, k)))
        layers.append(("bottleneck.conv2", (cout, cout, k, k)))
        for lvl in reversed(range(self.depth)):
            skip = b * 2 ** lvl
            layers.append((f"dec{lvl}.conv1", (skip, cout + skip, k, k)))
            layers.append((f"dec{lvl}.conv2", (skip, skip, k, k)))
            cout = skip
        layers.append(("head", (self.out_channels, b, 1, 1)))
        return layers


class UNet:
    def __init__(self, config: UNetConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _conv(self, x: Tensor, name: str, relu: bool = True) -> Tensor:
        w, b = self.params[name + ".weight"], self.params[name + ".bias"]
        y = T.conv2d(x, w, b, stride=1, padding=w.shape[-1] // 2)
        return T.relu(y) if relu else y

    def logits(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        m = self.config.multiple
        if h % m or w % m:
            raise ShapeError(
                f"input {h}x{w} must be divisible by {m}; pad by "
                f"({-h % m}, {-w % m}) rows/cols or use forward_padded")
        skips = []
        for lvl in range(self.config.depth):
            x = self._conv(self._conv(x, f"enc{lvl}.conv1"), f"enc{lvl}.conv2")
            skips.append(x)
            x = T.maxpool2d(x, 2)
        x = self._conv(self._conv(x, "bottleneck.conv1"), "bottleneck.conv2")
        axis = x.ndim - 3
        for lvl in reversed(range(self.config.depth)):
            x = T.concat([T.upsample2d(x, 2), skips[lvl]], axis=axis)
            x = self._conv(self._conv(x, f"dec{lvl}.conv1"), f"dec{lvl}.conv2")
        return self._conv(x, "head", relu=False)

    def __call__(self, x: Tensor) -> Tensor:
        return T.channel_softmax(self.logits(x))

    def forward_padded(self, x: Tensor, logits: bool = False) -> Tensor:
        """Reflect-pad to the next valid size, run, and crop back."""
        h, w = x.shape[-2:]
        m = self.config.multiple
        xp = T.pad_reflect(x, -h % m, -w % m)
        y = self.logits(xp) if logits else self(xp)
        if y.shape[-2:] != (h, w):
            y = T.crop2d(y, 0, 0, h, w)
        return y

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def save(self, path, optimizer: T.Adam | None = None, extra: dict | None = None) -> None:
        arrays = dict(self.state_arrays())
        meta = {"unet": asdict(self.config), "dtype": str(next(iter(self.params.values())).dtype)}
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
            meta["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "beta1": optimizer.beta1,
                            "beta2": optimizer.beta2, "eps": optimizer.eps}
        if extra:
            meta["extra"] = extra
        T.save_tensors(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "UNet":
        model, _, _ = load_checkpoint(path)
        return model


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNet:
    """He-uniform kernels for the ReLU convolutions, a small head, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in config.layer_shapes():
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in) if name != "head" else 0.1 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight")
        params[name + ".bias"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True, name=name + ".bias")
    return UNet(config, params)


def load_checkpoint(path) -> tuple[UNet, dict[str, np.ndarray], dict]:
    arrays, meta = T.load_tensors(path)
    if "unet" not in meta:
        raise ValueError(f"{path}: checkpoint carries no u-net config")
    config = UNetConfig(**meta["unet"])
    params = {}
    for name, _ in config.layer_shapes():
        for suffix in (".weight", ".bias"):
            key = name + suffix
            params[key] = Tensor(arrays[key].copy(), requires_grad=True, name=key)
    return UNet(config, params), arrays, meta


def unet_forward(model: UNet, image, frame: Frame = Frame.ORIGINAL) -> HeatmapStack:
    """Inference on a single ``(1, H, W)`` image; returns the ``K + 1`` channel stack."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.params["head.bias"].dtype))
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
    out = model(x)
    return HeatmapStack(out.data, frame)
