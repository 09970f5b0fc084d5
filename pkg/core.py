"""
Domain types and geometric primitives shared by the registration pipeline.

Coordinate convention: pixel (0, 0) is the center of the top-left pixel,
x grows to the right and y grows downward. Affine transforms and
displacement fields use pull semantics: they map a target-frame position to
the source-frame position that is sampled for it.
"""
from dataclasses import dataclass, field
from typing import Literal, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from _errors import GeometryError, InputError
from _globals import (
    DEFAULT_ANGLES,
    DEFAULT_DEFORMABLE_RESOLUTION,
    DEFAULT_RESOLUTIONS,
    DEFAULT_SCALE_TOLERANCE,
)

_DET_EPS = 1e-12


def _frozen(array):
    array = np.array(array, dtype=np.float64, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Normalized pixel grid of shape (height, width) or (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = _frozen(data[..., 0])
        if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
            raise InputError(f"unsupported image shape {data.shape}; expected (h, w) or (h, w, 3)")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise InputError("image must be at least 1x1")
        if not np.all(np.isfinite(data)):
            raise InputError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise InputError(f"image values outside [0, 1]: [{data.min()}, {data.max()}]")
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_array(cls, array):
        """Build an image from any real array, clipping into [0, 1]."""
        return cls(np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return 1 if self.data.ndim == 2 else 3

    @property
    def shape(self):
        return self.data.shape[:2]

    def require_channels(self, channels, what='image'):
        if self.channels != channels:
            raise InputError(f"{what} must have {channels} channel(s), got {self.channels}")
        return self


@dataclass(frozen=True, eq=False)
class AffineTransform2D:
    """2x3 matrix (a11, a12, t1 / a21, a22, t2) with pull semantics."""

    matrix: np.ndarray

    def __post_init__(self):
        matrix = _frozen(self.matrix)
        if matrix.shape == (3, 3):
            matrix = _frozen(matrix[:2])
        if matrix.shape != (2, 3):
            raise GeometryError(f"affine matrix must be 2x3, got {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise GeometryError("affine matrix contains non-finite values")
        if abs(np.linalg.det(matrix[:, :2])) <= _DET_EPS:
            raise GeometryError("degenerate affine transform (zero determinant)")
        object.__setattr__(self, 'matrix', matrix)

    @classmethod
    def identity(cls):
        return cls(np.eye(2, 3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def scaling(cls, sx, sy=None):
        sy = sx if sy is None else sy
        return cls(np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]]))

    @classmethod
    def rotation(cls, angle, center=(0.0, 0.0)):
        """Rotation by `angle` degrees about `center` (x toward y is positive)."""
        theta = np.deg2rad(angle)
        c, s = np.cos(theta), np.sin(theta)
        cx, cy = center
        linear = np.array([[c, -s], [s, c]])
        offset = np.array([cx, cy]) - linear @ np.array([cx, cy])
        return cls(np.column_stack([linear, offset]))

    def homogeneous(self):
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self):
        return AffineTransform2D(np.linalg.inv(self.homogeneous()))

    def apply(self, points):
        """Map an (n, 2) array of (x, y) points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return points @ self.matrix[:, :2].T + self.matrix[:, 2]

    def scale_factors(self):
        return scale_factors(self)

    def to_list(self):
        return [float(v) for v in self.matrix.ravel()]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-pixel (dx, dy) vectors stored as an array of shape (height, width, 2)."""

    vectors: np.ndarray

    def __post_init__(self):
        vectors = _frozen(self.vectors)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise InputError(f"displacement field must have shape (h, w, 2), got {vectors.shape}")
        if vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise InputError("empty field")
        if not np.all(np.isfinite(vectors)):
            raise InputError("displacement field contains non-finite values")
        object.__setattr__(self, 'vectors', vectors)

    @classmethod
    def zeros(cls, width, height):
        return cls(np.zeros((height, width, 2)))

    @property
    def height(self):
        return self.vectors.shape[0]

    @property
    def width(self):
        return self.vectors.shape[1]

    @property
    def shape(self):
        return self.vectors.shape[:2]

    def magnitude(self):
        return np.hypot(self.vectors[..., 0], self.vectors[..., 1])


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Ordered (x, y) points; `out_of_bounds` flags points excluded from TRE."""

    points: np.ndarray
    out_of_bounds: np.ndarray = field(default=None)

    def __post_init__(self):
        points = _frozen(np.asarray(self.points, dtype=np.float64).reshape(-1, 2))
        if self.out_of_bounds is None:
            flags = np.zeros(len(points), dtype=bool)
        else:
            flags = np.array(self.out_of_bounds, dtype=bool, copy=True).reshape(-1)
        if len(flags) != len(points):
            raise InputError("out_of_bounds flags must match the number of points")
        flags.flags.writeable = False
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'out_of_bounds', flags)

    def __len__(self):
        return len(self.points)


class LevelConfig(BaseModel):
    """Settings of one deformable resolution level."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    theta: float = Field(1.0, ge=0.0)
    iterations: int = Field(100, ge=0)
    step_size: float = Field(0.5, gt=0.0)
    mi_bins: int = Field(16, ge=2)
    mi_window: int = Field(64, ge=2)
    mi_stride: int = Field(32, ge=1)
    downsample: int = Field(1, ge=1)
    # Gaussian sigma in level pixels applied to every update; 0 disables
    smoothing: float = Field(2.0, ge=0.0)


def _default_levels():
    return (LevelConfig(downsample=4), LevelConfig(downsample=2), LevelConfig(downsample=1))


class RegistrationConfig(BaseModel):
    """Every tunable of the initial alignment and the deformable stage."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    angles: Tuple[float, ...] = DEFAULT_ANGLES
    resolutions: Tuple[int, ...] = DEFAULT_RESOLUTIONS
    scale_tolerance: float = Field(DEFAULT_SCALE_TOLERANCE, gt=0.0, lt=1.0)
    levels: Tuple[LevelConfig, ...] = Field(default_factory=_default_levels)
    deterministic_seed: int = 0
    direction: Literal['he_to_shg', 'shg_to_he'] = 'he_to_shg'
    select_by: Literal['inliers', 'matches'] = 'inliers'
    ransac_threshold: float = Field(3.0, gt=0.0)
    ransac_iterations: int = Field(2000, ge=1)
    min_inliers: int = Field(8, ge=3)
    min_inlier_fraction: float = Field(0.05, ge=0.0, le=1.0)
    max_keypoints: int = Field(2000, ge=1)
    match_ratio: float = Field(0.8, gt=0.0, le=1.0)
    deformable_resolution: int = Field(DEFAULT_DEFORMABLE_RESOLUTION, ge=32)
    workers: int = Field(1, ge=1)

    @field_validator('angles')
    @classmethod
    def _angles_nonempty(cls, value):
        if not value:
            raise ValueError('angles must not be empty')
        return value

    @field_validator('resolutions')
    @classmethod
    def _resolutions_valid(cls, value):
        if not value:
            raise ValueError('resolutions must not be empty')
        if any(r < 32 for r in value):
            raise ValueError('every resolution must be >= 32 pixels')
        return value

    @model_validator(mode='after')
    def _levels_coarse_to_fine(self):
        factors = [level.downsample for level in self.levels]
        if any(finer > coarser for coarser, finer in zip(factors, factors[1:])):
            raise ValueError('levels must be ordered coarse to fine (non-increasing downsample)')
        return self


def compose_affine(a, b):
    """
    Compose two pull transforms.

    Parameters:
    - a (AffineTransform2D): Transform applied second.
    - b (AffineTransform2D): Transform applied first.

    Returns:
    - AffineTransform2D: p -> a(b(p)).
    """
    return AffineTransform2D(a.homogeneous() @ b.homogeneous())


def apply_affine_to_point(t, p):
    x, y = p
    m = t.matrix
    return (m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2])


def scale_factors(t):
    """
    Singular values of the linear part, ascending.

    Raises:
    - GeometryError: If the linear part is degenerate.
    """
    singular = np.linalg.svd(t.matrix[:, :2], compute_uv=False)
    s_min, s_max = float(singular.min()), float(singular.max())
    if s_min <= _DET_EPS:
        raise GeometryError("degenerate affine transform (zero singular value)")
    return s_min, s_max


def pixel_grid(width, height):
    """(x, y) coordinate arrays of shape (height, width)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys
