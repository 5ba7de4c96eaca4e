"""Local feature maps: binary file format, pooling, and a toy conv backbone.

A feature map is a (channels, h, w) grid of float64 cell vectors.  On disk
the FMAP1 format stores magic "FMAP1", three u32 little-endian dims, then
channel-major float32 little-endian values; loading widens to float64.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError

FMAP_MAGIC = b"FMAP1"
_HEADER = struct.Struct("<III")


def load_feature_file(path) -> np.ndarray:
    """Read an FMAP1 file into a float64 (channels, h, w) array."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except FileNotFoundError as missing:
        raise DataError(f"feature file {path} does not exist") from missing
    if len(blob) < len(FMAP_MAGIC) or blob[: len(FMAP_MAGIC)] != FMAP_MAGIC:
        raise DataError(f"bad-magic: {path} is not an FMAP1 file")
    offset = len(FMAP_MAGIC)
    if len(blob) < offset + _HEADER.size:
        raise DataError(f"truncated: {path} ends inside the FMAP1 header")
    channels, height, width = _HEADER.unpack_from(blob, offset)
    if channels == 0 or height == 0 or width == 0:
        raise DataError(f"zero-dims: {path} declares shape ({channels}, {height}, {width})")
    offset += _HEADER.size
    expected = channels * height * width * 4
    payload = blob[offset:]
    if len(payload) < expected:
        raise DataError(f"truncated: {path} carries {len(payload)} payload bytes, expected {expected}")
    if len(payload) > expected:
        raise DataError(f"trailing-bytes: {path} carries {len(payload) - expected} extra bytes")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"non-finite: {path} contains NaN or Inf values")
    return values.reshape(channels, height, width)


def write_feature_file(path, values: np.ndarray):
    """Write a (channels, h, w) array as FMAP1, narrowing to float32."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DataError(f"feature map must be a non-empty 3-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature map contains non-finite values")
    with open(path, "wb") as handle:
        handle.write(FMAP_MAGIC)
        handle.write(_HEADER.pack(*arr.shape))
        handle.write(arr.astype("<f4").tobytes())


def global_pool(fmap: Tensor) -> Tensor:
    """Per-channel mean over the grid: (c, h, w) -> (c,)."""
    if fmap.ndim != 3:
        raise ad.ShapeError(f"global_pool: expected a 3-d map, got shape {fmap.shape}")
    return ad.mean(fmap, axis=(1, 2))


def weighted_pool(fmap: Tensor, weights: Tensor) -> Tensor:
    """Importance-weighted pooling that keeps the 1/(h*w) normalization.

    out_c = (1/(h*w)) * sum_{j,k} weights[j,k] * fmap[c,j,k]; with all
    weights one this equals global_pool.
    """
    if fmap.ndim != 3 or weights.shape != fmap.shape[1:]:
        raise ad.ShapeError(f"weighted_pool: map {fmap.shape} vs weights {weights.shape}")
    channels = fmap.shape[0]
    cells = fmap.shape[1] * fmap.shape[2]
    flat = ad.reshape(fmap, (channels, cells))
    pooled = ad.matmul(flat, ad.reshape(weights, (cells,)))
    return ad.scale(pooled, 1.0 / cells)


@dataclass
class ToyBackbone:
    """Two 3x3 stride-2 ReLU convolutions mapping (3, H, W) to (channels, h, w).

    Padding 1 makes each conv halve the spatial size with ceiling rounding,
    so the output grid is (ceil(H/4), ceil(W/4)); H, W >= 8 keeps h, w >= 2.
    Differentiable end to end, so it can train jointly with the losses.
    """

    conv1_kernel: Tensor
    conv1_bias: Tensor
    conv2_kernel: Tensor
    conv2_bias: Tensor

    @property
    def out_channels(self):
        return self.conv2_kernel.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "backbone.conv1.kernel": self.conv1_kernel,
            "backbone.conv1.bias": self.conv1_bias,
            "backbone.conv2.kernel": self.conv2_kernel,
            "backbone.conv2.bias": self.conv2_bias,
        }

    def forward(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ad.ShapeError(f"backbone: expected a (3, H, W) image, got {image.shape}")
        if image.shape[1] < 8 or image.shape[2] < 8:
            raise ad.ShapeError(f"backbone: needs H, W >= 8, got {image.shape}")
        h = ad.relu(ad.conv2d(image, self.conv1_kernel, self.conv1_bias, stride=2, padding=1))
        return ad.relu(ad.conv2d(h, self.conv2_kernel, self.conv2_bias, stride=2, padding=1))


def backbone_output_shape(height: int, width: int, channels: int) -> tuple[int, int, int]:
    """Shape the backbone produces for a (3, height, width) input."""
    def ceil_div(a, b):
        return -(-a // b)

    return channels, ceil_div(height, 4), ceil_div(width, 4)


def init_backbone(rng, channels: int = 32, mid_channels: int = 16) -> ToyBackbone:
    """Uniform +-1/sqrt(fan_in) init for both conv layers."""
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    fan1 = 3 * 3 * 3
    fan2 = mid_channels * 3 * 3
    return ToyBackbone(
        conv1_kernel=uniform((mid_channels, 3, 3, 3), fan1),
        conv1_bias=uniform((mid_channels,), fan1),
        conv2_kernel=uniform((channels, mid_channels, 3, 3), fan2),
        conv2_bias=uniform((channels,), fan2),
    )
