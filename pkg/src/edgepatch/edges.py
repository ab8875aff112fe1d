"""Fixed multi-scale edge backbone.

Five side outputs at dyadic resolutions: each level is the Gaussian-
smoothed gradient magnitude of a 2x-downsampled image pyramid, normalized
into [0,1]. The backbone has no trainable parameters and is implemented
with graph ops so patch gradients can flow through it; detect_edges is
the plain-array entry point.
"""

from dataclasses import dataclass, field

import numpy as np

from edgepatch.errors import ModelError
from edgepatch.nn import tensor as T
from edgepatch.data.types import PersonImage

N_LEVELS = 5
MIN_SIDE = 16
# max attainable central-difference magnitude for values in [0,1]
_MAX_GRAD = np.sqrt(0.5)
_EDGE_EPS = 1e-12

BACKBONE_ID = "grad-pyramid-5"


def _gaussian_kernel(sigma=1.0, radius=2):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_K1D = _gaussian_kernel()
_KROW = T.Tensor(_K1D.reshape(1, 1, 1, -1))
_KCOL = T.Tensor(_K1D.reshape(1, 1, -1, 1))


def _replicate_pad(x, pad_h, pad_w):
    """Edge-replication padding built from slices (differentiable)."""
    if pad_w:
        left = T.concat([x[:, :, :, 0:1]] * pad_w, axis=3)
        right = T.concat([x[:, :, :, -1:]] * pad_w, axis=3)
        x = T.concat([left, x, right], axis=3)
    if pad_h:
        top = T.concat([x[:, :, 0:1, :]] * pad_h, axis=2)
        bottom = T.concat([x[:, :, -1:, :]] * pad_h, axis=2)
        x = T.concat([top, x, bottom], axis=2)
    return x


def _blur(x):
    """Separable Gaussian blur with replicate borders (keeps constants flat)."""
    r = len(_K1D) // 2
    x = _replicate_pad(x, 0, r)
    x = T.conv2d(x, _KROW)
    x = _replicate_pad(x, r, 0)
    return T.conv2d(x, _KCOL)


def _central_gradients(x):
    """Central differences with zero response on the one-pixel border."""
    n, c, h, w = x.shape
    gx_in = T.mul(T.sub(x[:, :, :, 2:], x[:, :, :, :-2]), 0.5)
    zc = T.Tensor(np.zeros((n, c, h, 1)))
    gx = T.concat([zc, gx_in, zc], axis=3)
    gy_in = T.mul(T.sub(x[:, :, 2:, :], x[:, :, :-2, :]), 0.5)
    zr = T.Tensor(np.zeros((n, c, 1, w)))
    gy = T.concat([zr, gy_in, zr], axis=2)
    return gx, gy


def edge_response(gray):
    """Normalized gradient-magnitude edge map of a (N,1,H,W) tensor."""
    b = _blur(gray)
    gx, gy = _central_gradients(b)
    mag = T.sqrt(T.add(T.add(T.mul(gx, gx), T.mul(gy, gy)), _EDGE_EPS ** 2))
    return T.mul(mag, 1.0 / _MAX_GRAD)


def grayscale_tensor(x):
    """(N,C,H,W) -> (N,1,H,W) luminance; C must be 1 or 3."""
    c = x.shape[1]
    if c == 1:
        return x
    if c != 3:
        raise ModelError(f"expected 1 or 3 channels, got {c}")
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return T.add(T.add(T.mul(r, 0.299), T.mul(g, 0.587)), T.mul(b, 0.114))


def check_spatial(h, w):
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ModelError(f"input below minimum resolution: {h}x{w} (need >= {MIN_SIDE})")
    if h % 16 or w % 16:
        raise ModelError(f"input size must be a multiple of 16, got {h}x{w}")


def edge_pyramid(x):
    """Five edge maps of a (N,C,H,W) tensor at (H,W), (H/2,W/2), ... (H/16,W/16)."""
    n, c, h, w = x.shape
    check_spatial(h, w)
    gray = grayscale_tensor(x)
    levels = []
    for k in range(N_LEVELS):
        if k > 0:
            gray = T.avgpool2x2(gray)
        levels.append(edge_response(gray))
    return levels


@dataclass
class EdgeMapStack:
    """Side outputs L1..L5, finest first; absent levels are None."""

    levels: list
    removed_set: frozenset = field(default_factory=frozenset)

    def level(self, k):
        """1-based access; returns None for removed levels."""
        return self.levels[k - 1]

    @property
    def input_size(self):
        for lv in self.levels:
            if lv is not None:
                return lv.shape
        raise ModelError("stack has no levels")


def detect_edges(image) -> EdgeMapStack:
    """Run the backbone on one image (PersonImage or HxWxC array)."""
    pixels = image.pixels if isinstance(image, PersonImage) else np.asarray(image)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    check_spatial(h, w)
    x = T.Tensor(np.ascontiguousarray(pixels.transpose(2, 0, 1))[None])
    levels = edge_pyramid(x)
    return EdgeMapStack(levels=[lv.data[0, 0].copy() for lv in levels])
