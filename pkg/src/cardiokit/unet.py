"""3D residual U-Net for 4-class short-axis segmentation.

Encoder of residual blocks with max-pool downsampling, a bottleneck block,
and a decoder that trilinearly upsamples, concatenates the matching encoder
skip, and applies another residual block; a final 1x1x1 convolution maps to
the 4 class channels.  Each residual block runs conv -> batch-norm -> ReLU
-> dropout -> conv -> batch-norm, adds the skip (1x1x1 projection when the
channel count changes), then applies a final ReLU.

Activations use the (channels, X, Y, Z, batch) layout of the autodiff
engine.  The default geometry (levels=2, base_channels=8) trains in minutes
on a CPU; deeper configurations are supported but not the test default.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .serialization import CorruptBundle, pack_container, unpack_container
from .volume import ShapeMismatch

CHECKPOINT_MAGIC = b"CKNT"
CHECKPOINT_VERSION = 1

BN_MOMENTUM = 0.9  # fraction of the old running statistic retained per batch
BN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters.

    levels: encoder depth (downsampling stages). base_channels: channel
    count of the first stage; each stage doubles it. out_channels is fixed
    at 4 by the label scheme.
    """

    levels: int = 2
    base_channels: int = 8
    dropout_rate: float = 0.1
    out_channels: int = 4

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if self.out_channels != 4:
            raise ValueError(f"out_channels is fixed at 4, got {self.out_channels}")


class Conv3d:
    """Same-size 3D convolution with He-normal weight init."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True):
        std = float(np.sqrt(2.0 / (cin * k**3)))
        self.w = Tensor(rng.normal(0.0, std, (cout, cin, k, k, k)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv3d(x, self.w)
        if self.b is not None:
            out = out + self.b.reshape((self.cout, 1, 1, 1, 1))
        return out

    def zero_(self):
        self.w.data[...] = 0.0
        if self.b is not None:
            self.b.data[...] = 0.0

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class BatchNorm3d:
    """Per-channel normalization over the spatial and batch axes.

    Training uses batch statistics and updates running averages with
    momentum BN_MOMENTUM; evaluation, and training batches of size 1, use
    the running statistics (held constant for the gradient).
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.channels = channels

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = self.channels
        shape = (c, 1, 1, 1, 1)
        if training and x.data.shape[-1] > 1:
            mu = x.mean(axis=(1, 2, 3, 4), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(1, 2, 3, 4), keepdims=True)
            m = BN_MOMENTUM
            self.running_mean = (m * self.running_mean
                                 + (1.0 - m) * mu.data.reshape(c)).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var
                                + (1.0 - m) * var.data.reshape(c)).astype(self.running_var.dtype)
            xhat = centered * ((var + BN_EPS) ** -0.5)
        else:
            mu = self.running_mean.reshape(shape)
            inv = 1.0 / np.sqrt(self.running_var.reshape(shape) + BN_EPS)
            xhat = (x - mu) * inv
        return self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var

    def set_buffer(self, name: str, value: np.ndarray):
        arr = np.asarray(value, dtype=self.running_mean.dtype)
        if name == "running_mean":
            self.running_mean = arr.copy()
        elif name == "running_var":
            self.running_var = arr.copy()
        else:
            raise KeyError(name)


class Dropout:
    """Scaled-mask dropout; identity in evaluation mode or at rate 0."""

    def __init__(self, rate: float):
        self.rate = float(rate)

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
        return x * mask


class ResBlock:
    def __init__(self, cin: int, cout: int, dropout_rate: float,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv3d(cin, cout, 3, rng, dtype)
        self.bn1 = BatchNorm3d(cout, dtype)
        self.drop = Dropout(dropout_rate)
        self.conv2 = Conv3d(cout, cout, 3, rng, dtype)
        self.bn2 = BatchNorm3d(cout, dtype)
        self.proj = Conv3d(cin, cout, 1, rng, dtype, bias=False) if cin != cout else None

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator) -> Tensor:
        h = ad.relu(self.bn1(self.conv1(x), training))
        h = self.drop(h, training, rng)
        h = self.bn2(self.conv2(h), training)
        skip = self.proj(x) if self.proj is not None else x
        return ad.relu(h + skip)

    def named_parameters(self, prefix: str):
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")
        yield from self.bn2.named_parameters(f"{prefix}.bn2")
        if self.proj is not None:
            yield from self.proj.named_parameters(f"{prefix}.proj")

    def named_buffers(self, prefix: str):
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")


class UNet:
    """Residual U-Net; construction is deterministic given rng_seed."""

    def __init__(self, config: NetConfig = NetConfig(), rng_seed: int = 0,
                 dtype=np.float32, in_channels: int = 1):
        self.config = config
        self.in_channels = in_channels
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(rng_seed)

        chans = [config.base_channels * (2**i) for i in range(config.levels + 1)]
        self.enc = []
        cin = in_channels
        for i in range(config.levels):
            self.enc.append(ResBlock(cin, chans[i], config.dropout_rate, rng, dtype))
            cin = chans[i]
        self.bottleneck = ResBlock(cin, chans[-1], config.dropout_rate, rng, dtype)
        self.dec = []
        up = chans[-1]
        for i in reversed(range(config.levels)):
            self.dec.append(ResBlock(up + chans[i], chans[i], config.dropout_rate, rng, dtype))
            up = chans[i]
        self.final = Conv3d(up, config.out_channels, 1, rng, dtype)
        # start at the uniform prediction: zero logits regardless of input
        self.final.zero_()
        self._dropout_rng = np.random.default_rng(rng.integers(2**63))

    def __call__(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        c = x.data.shape[0]
        if x.data.ndim != 5 or c != self.in_channels:
            raise ShapeMismatch(
                f"expected ({self.in_channels}, X, Y, Z, N) input, got {x.data.shape}"
            )
        div = 2**self.config.levels
        spatial = x.data.shape[1:4]
        if any(s % div for s in spatial):
            raise ShapeMismatch(f"spatial dims {spatial} not divisible by {div}")

        rng = self._dropout_rng
        skips = []
        h = x
        for block in self.enc:
            h = block(h, training, rng)
            skips.append(h)
            h = ad.maxpool2(h)
        h = self.bottleneck(h, training, rng)
        for block, skip in zip(self.dec, reversed(skips)):
            h = ad.upsample2(h)
            h = ad.concat(h, skip, axis=0)
            h = block(h, training, rng)
        return self.final(h)

    def named_parameters(self):
        for i, block in enumerate(self.enc):
            yield from block.named_parameters(f"enc{i}")
        yield from self.bottleneck.named_parameters("bottleneck")
        for i, block in enumerate(self.dec):
            yield from block.named_parameters(f"dec{i}")
        yield from self.final.named_parameters("final")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for i, block in enumerate(self.enc):
            yield from block.named_buffers(f"enc{i}")
        yield from self.bottleneck.named_buffers("bottleneck")
        for i, block in enumerate(self.dec):
            yield from block.named_buffers(f"dec{i}")

    def parameter_checksum(self) -> float:
        """Order-stable digest of all parameters, for determinism checks."""
        return float(sum(np.float64(p.data).sum() * (i + 1)
                         for i, (_, p) in enumerate(self.named_parameters())))


def forward(net: UNet, x, training: bool = False) -> Tensor:
    """Run the network on a (channels, X, Y, Z, batch) input."""
    return net(x, training)


def save_checkpoint(net: UNet, meta: dict | None = None) -> bytes:
    """Serialize architecture, parameters, batch-norm running statistics,
    and free-form training metadata."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in net.named_parameters():
        arrays["param." + name] = p.data.astype(np.float32)
    for name, buf in net.named_buffers():
        arrays["buffer." + name] = buf.astype(np.float32)
    header_meta = {
        "config": asdict(net.config),
        "in_channels": net.in_channels,
        "training_meta": meta or {},
    }
    return pack_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header_meta, arrays)


def load_checkpoint(data: bytes) -> tuple[UNet, dict]:
    """Rebuild a network from save_checkpoint() output."""
    meta, arrays = unpack_container(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        config = NetConfig(**meta["config"])
        in_channels = int(meta["in_channels"])
        training_meta = meta.get("training_meta", {})
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptBundle(f"bad checkpoint metadata: {e}") from None
    net = UNet(config, rng_seed=0, in_channels=in_channels)
    wanted = {"param." + n for n, _ in net.named_parameters()}
    wanted |= {"buffer." + n for n, _ in net.named_buffers()}
    if wanted != set(arrays):
        raise CorruptBundle("checkpoint arrays do not match the architecture")
    for name, p in net.named_parameters():
        src = arrays["param." + name]
        if src.shape != p.data.shape:
            raise CorruptBundle(f"parameter {name} has shape {src.shape}, "
                                f"expected {p.data.shape}")
        p.data[...] = src
    buffer_owners = _buffer_owners(net)
    for full, arr in arrays.items():
        if full.startswith("buffer."):
            owner, leaf = buffer_owners[full[len("buffer."):]]
            owner.set_buffer(leaf, arr)
    return net, training_meta


def _buffer_owners(net: UNet) -> dict[str, tuple[BatchNorm3d, str]]:
    owners: dict[str, tuple[BatchNorm3d, str]] = {}

    def visit(block: ResBlock, prefix: str):
        owners[f"{prefix}.bn1.running_mean"] = (block.bn1, "running_mean")
        owners[f"{prefix}.bn1.running_var"] = (block.bn1, "running_var")
        owners[f"{prefix}.bn2.running_mean"] = (block.bn2, "running_mean")
        owners[f"{prefix}.bn2.running_var"] = (block.bn2, "running_var")

    for i, block in enumerate(net.enc):
        visit(block, f"enc{i}")
    visit(net.bottleneck, "bottleneck")
    for i, block in enumerate(net.dec):
        visit(block, f"dec{i}")
    return owners
