"""
Modality preprocessing that makes H&E and SHG images geometrically comparable.

H&E: hue channel -> min/max normalization -> global histogram equalization
-> 5x5 median filter. SHG: the same chain without the hue conversion.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage  # type: ignore
from skimage.color import rgb2hsv  # type: ignore
from skimage.transform import resize  # type: ignore

from _errors import InputError
from core import AffineTransform2D, RasterImage

MEDIAN_SIZE = 5


@dataclass(frozen=True)
class PyramidLevel:
    """A resized image plus the geometry needed to map back to full resolution."""

    image: RasterImage
    scale: float
    original_width: int
    original_height: int

    @property
    def scale_x(self):
        return self.image.width / self.original_width

    @property
    def scale_y(self):
        return self.image.height / self.original_height

    def full_to_level(self):
        """Affine mapping full-resolution pixel coordinates into this level."""
        sx, sy = self.scale_x, self.scale_y
        return AffineTransform2D(np.array([
            [sx, 0.0, 0.5 * sx - 0.5],
            [0.0, sy, 0.5 * sy - 0.5],
        ]))

    def level_to_full(self):
        return self.full_to_level().inverse()


def rgb_to_hue(img):
    """
    Hue channel of an RGB image, normalized to [0, 1] (angle / 360 degrees).

    Zero-saturation pixels get hue 0.
    """
    img.require_channels(3, 'hue conversion input')
    hue = rgb2hsv(img.data)[..., 0]
    return RasterImage.from_array(hue)


def normalize_minmax(img):
    """Stretch to [0, 1]; a constant image maps to all zeros."""
    data = img.data
    low, high = data.min(), data.max()
    if high - low <= 0:
        return RasterImage(np.zeros_like(data))
    return RasterImage.from_array((data - low) / (high - low))


def equalize_histogram(img, bins=256):
    """
    Global histogram equalization.

    Parameters:
    - img (RasterImage): Single-channel image.
    - bins (int): Number of uniform bins on [0, 1].

    Returns:
    - RasterImage: Each pixel replaced by the CDF value of its bin.
    """
    img.require_channels(1, 'histogram equalization input')
    if bins < 1:
        raise InputError("bins must be positive")
    index = np.minimum((img.data * bins).astype(np.int64), bins - 1)
    counts = np.bincount(index.ravel(), minlength=bins)
    cdf = np.cumsum(counts) / index.size
    return RasterImage.from_array(cdf[index])


def median_filter_5x5(img):
    """5x5 median filter with edge replication at the borders."""
    img.require_channels(1, 'median filter input')
    if img.width < MEDIAN_SIZE or img.height < MEDIAN_SIZE:
        raise InputError(f"median filter needs at least {MEDIAN_SIZE}x{MEDIAN_SIZE} pixels, "
                         f"got {img.width}x{img.height}")
    return RasterImage(ndimage.median_filter(img.data, size=MEDIAN_SIZE, mode='nearest'))


def preprocess_he(img, bins=256):
    img.require_channels(3, 'H&E image')
    return median_filter_5x5(equalize_histogram(normalize_minmax(rgb_to_hue(img)), bins))


def preprocess_shg(img, bins=256):
    img.require_channels(1, 'SHG image')
    return median_filter_5x5(equalize_histogram(normalize_minmax(img), bins))


def resize_to_shape(img, width, height):
    """Bilinear resize to an explicit size; Gaussian pre-smoothing when shrinking."""
    if width < 1 or height < 1:
        raise InputError(f"invalid target size {width}x{height}")
    shape = (height, width) + img.data.shape[2:]
    shrinking = width < img.width or height < img.height
    data = resize(img.data, shape, order=1, mode='edge',
                  anti_aliasing=shrinking, preserve_range=True)
    return RasterImage.from_array(data)


def resize_to_max_dim(img, target):
    """
    Aspect-preserving resize so that max(width, height) equals `target`.

    Parameters:
    - img (RasterImage): Image to resize.
    - target (int): Size of the longer side in pixels.

    Returns:
    - PyramidLevel: The resized image and its width ratio to the original.
    """
    if target < 1:
        raise InputError("target size must be at least 1 pixel")
    ratio = target / max(img.width, img.height)
    width = max(1, int(round(img.width * ratio)))
    height = max(1, int(round(img.height * ratio)))
    resized = img if (width, height) == (img.width, img.height) else resize_to_shape(img, width, height)
    return PyramidLevel(resized, width / img.width, img.width, img.height)
