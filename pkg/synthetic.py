"""
Seeded synthetic H&E / SHG pairs with a known ground-truth transform.

The H&E-like image carries smooth eosin-stained tissue on a pale lavender
background, purple nuclei and deep-pink collagen fibers; its hue rises with
tissue density and fibers and drops at nuclei. The SHG counterpart is a
structure channel (collagen signal plus luminance edges, dark at nuclei) that
is warped into the target frame by a rotation, translation, optional uniform
scale and a smooth sinusoidal field.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage  # type: ignore
from skimage.color import rgb2gray  # type: ignore
from skimage.draw import disk, line_aa  # type: ignore
from skimage.filters import sobel  # type: ignore

from _errors import InputError
from core import AffineTransform2D, DisplacementField, LandmarkSet, RasterImage, compose_affine, pixel_grid
from deformable import bake_affine_to_field

MIN_SIZE = 64
LANDMARK_GRID = 5

BACKGROUND = np.array([0.93, 0.90, 0.97])
EOSIN = np.array([0.91, 0.45, 0.68])
COLLAGEN = np.array([0.85, 0.30, 0.45])
HEMATOXYLIN = np.array([0.35, 0.22, 0.60])
STAIN_NOISE = 0.004
SHG_PERCENTILE = 30


@dataclass(frozen=True)
class SyntheticPair:
    he: RasterImage
    shg: RasterImage
    shg_source: RasterImage
    affine: AffineTransform2D
    field: DisplacementField
    landmarks_source: LandmarkSet
    landmarks_target: LandmarkSet


def _normalized(array):
    span = array.max() - array.min()
    return (array - array.min()) / span if span > 0 else np.zeros_like(array)


def _nuclei(rng, size):
    mask = np.zeros((size, size))
    for _ in range(max(8, size * size // 1500)):
        center = rng.uniform(0, size - 1, 2)
        rr, cc = disk(tuple(center), rng.uniform(3.0, 7.0), shape=(size, size))
        mask[rr, cc] = 1.0
    return np.clip(ndimage.gaussian_filter(mask, 1.0), 0.0, 1.0)


def _fibers(rng, size):
    mask = np.zeros((size, size))
    for _ in range(max(4, size // 16)):
        y0, x0 = rng.uniform(0, size - 1, 2)
        direction = rng.uniform(0, np.pi)
        length = rng.uniform(size / 8, size / 3)
        y1 = np.clip(y0 + length * np.sin(direction), 0, size - 1)
        x1 = np.clip(x0 + length * np.cos(direction), 0, size - 1)
        for offset in (-1, 0, 1):
            rr, cc, val = line_aa(int(round(y0)), int(np.clip(round(x0) + offset, 0, size - 1)),
                                  int(round(y1)), int(np.clip(round(x1) + offset, 0, size - 1)))
            mask[rr, cc] = np.maximum(mask[rr, cc], val)
    return np.clip(ndimage.gaussian_filter(mask, 0.8) * 1.5, 0.0, 1.0)


def _stain(tissue, fibers, nuclei, rng):
    rgb = BACKGROUND * (1 - tissue[..., None]) + EOSIN * tissue[..., None]
    rgb = rgb * (1 - fibers[..., None]) + COLLAGEN * fibers[..., None]
    rgb = rgb * (1 - nuclei[..., None]) + HEMATOXYLIN * nuclei[..., None]
    return np.clip(rgb + rng.normal(0.0, STAIN_NOISE, rgb.shape), 0.0, 1.0)


def _structure_channel(rgb, fibers, tissue, nuclei):
    edges = _normalized(sobel(ndimage.gaussian_filter(rgb2gray(rgb), 1.5)))
    # collagen: bright fibers over a stroma signal that vanishes inside nuclei
    collagen = fibers + 0.35 * tissue * (1 - nuclei)
    signal = collagen + 0.1 * edges
    signal = np.where(signal >= np.percentile(signal, SHG_PERCENTILE), signal, 0.0)
    return _normalized(signal)


def _ground_truth(size, rotation, translation, scale):
    center = (size - 1) / 2.0
    about_center = compose_affine(AffineTransform2D.translation(center, center),
                                  compose_affine(AffineTransform2D.scaling(1.0 / scale),
                                                 AffineTransform2D.translation(-center, -center)))
    return compose_affine(AffineTransform2D.rotation(rotation, (center, center)),
                          compose_affine(about_center, AffineTransform2D.translation(*translation)))


def _sinusoid(xs, ys, amplitude, period):
    return np.stack([amplitude * np.sin(2 * np.pi * ys / period),
                     amplitude * np.sin(2 * np.pi * xs / period)], axis=-1)


def make_synthetic_pair(seed=0, size=512, rotation=0.0, translation=(0.0, 0.0), deform_amplitude=0.0, scale=1.0):
    """
    Generate a deterministic H&E / SHG pair with known geometry.

    Parameters:
    - seed (int): Random seed; equal seeds give identical pairs.
    - size (int): Side length of both square images, at least 64.
    - rotation (float): Ground-truth rotation in degrees about the image center.
    - translation (tuple): Ground-truth (tx, ty) in pixels.
    - deform_amplitude (float): Peak displacement of the sinusoidal field in pixels.
    - scale (float): Uniform magnification of the target content.

    Returns:
    - SyntheticPair: Source H&E, target SHG, the ground-truth pull affine and
      full field (target -> source), and a 5x5 landmark grid in both frames.
    """
    if size < MIN_SIZE:
        raise InputError(f"synthetic size must be >= {MIN_SIZE}, got {size}")
    if scale <= 0 or deform_amplitude < 0:
        raise InputError("scale must be positive and deform_amplitude non-negative")

    rng = np.random.default_rng(seed)
    tissue = np.clip(0.25 + 0.75 * _normalized(ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 24)),
                     0.0, 1.0)
    nuclei = _nuclei(rng, size)
    fibers = _fibers(rng, size)
    rgb = _stain(tissue, fibers, nuclei, rng)
    shg_source = _structure_channel(rgb, fibers, tissue, nuclei)

    affine = _ground_truth(size, rotation, translation, scale)
    xs, ys = pixel_grid(size, size)
    residual = _sinusoid(xs, ys, deform_amplitude, size / 2.0)
    field = DisplacementField(bake_affine_to_field(affine, size, size).vectors + residual)
    # outside the source the SHG detector sees nothing
    target = ndimage.map_coordinates(shg_source, [ys + field.vectors[..., 1], xs + field.vectors[..., 0]],
                                     order=1, mode='constant', cval=0.0)

    ticks = np.linspace(0.15, 0.85, LANDMARK_GRID) * (size - 1)
    grid_x, grid_y = np.meshgrid(ticks, ticks)
    points_target = np.column_stack([grid_x.ravel(), grid_y.ravel()])
    points_source = (affine.apply(points_target)
                     + _sinusoid(points_target[:, 0], points_target[:, 1], deform_amplitude, size / 2.0))
    outside = np.any((points_source < 0) | (points_source > size - 1), axis=1)

    return SyntheticPair(
        he=RasterImage(rgb),
        shg=RasterImage.from_array(target),
        shg_source=RasterImage(shg_source),
        affine=affine,
        field=field,
        landmarks_source=LandmarkSet(points_source, outside),
        landmarks_target=LandmarkSet(points_target),
    )
