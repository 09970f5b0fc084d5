"""
Exhaustive multi-resolution, multi-rotation initial alignment.

Every (angle, resolution) candidate is matched independently; candidates
whose recovered transform changes scale by more than the configured
tolerance, or that keep fewer RANSAC inliers than the configured floor, are
rejected; the accepted candidate with the most matched keypoints wins.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from rich.progress import track  # type: ignore
from scipy import ndimage  # type: ignore

from _errors import GeometryError, InputError, PluginError
from _logging import get_logger
from core import AffineTransform2D, RasterImage, compose_affine, pixel_grid, scale_factors
from features import estimate_affine_ransac
from preprocess import preprocess_he, preprocess_shg, resize_to_max_dim

_BOUNDS_EPS = 1e-6


@dataclass(frozen=True)
class CandidateResult:
    angle: float
    resolution: int
    transform: AffineTransform2D
    match_count: int
    inlier_count: int
    accepted: bool
    rejection_reason: Optional[str] = None

    def to_dict(self):
        return {
            'angle': self.angle,
            'resolution': self.resolution,
            'transform': self.transform.to_list(),
            'match_count': self.match_count,
            'inlier_count': self.inlier_count,
            'accepted': self.accepted,
            'rejection_reason': self.rejection_reason,
        }


class CandidateLog(list):
    """Candidates in (angle, resolution) order plus the selection outcome."""

    def __init__(self, candidates=(), selected=None):
        super().__init__(candidates)
        self.selected = selected

    @property
    def no_accepted_candidate(self):
        return self.selected is None


def resample_affine(img, t, width=None, height=None, fill=None):
    """
    Pull-resample `img` through `t` with bilinear interpolation.

    Parameters:
    - img (RasterImage): Source image.
    - t (AffineTransform2D): Maps output pixel coordinates to source coordinates.
    - width, height (int): Output size; defaults to the source size.
    - fill (float or None): Value for reads outside the source; None clamps to the edge.

    Returns:
    - RasterImage: The resampled image.
    """
    width = img.width if width is None else width
    height = img.height if height is None else height
    xs, ys = pixel_grid(width, height)
    m = t.matrix
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    channels = [img.data] if img.channels == 1 else [img.data[..., c] for c in range(3)]
    out = [ndimage.map_coordinates(ch, [sy, sx], order=1, mode='nearest') for ch in channels]
    data = out[0] if img.channels == 1 else np.stack(out, axis=-1)
    if fill is not None:
        outside = ((sx < -_BOUNDS_EPS) | (sx > img.width - 1 + _BOUNDS_EPS)
                   | (sy < -_BOUNDS_EPS) | (sy > img.height - 1 + _BOUNDS_EPS))
        data[outside] = fill
    return RasterImage.from_array(data)


def rotate_image(img, angle):
    """
    Rotate about the image center into a same-size canvas (outside reads are 0).

    Returns:
    - (RasterImage, AffineTransform2D): Rotated image and the transform mapping
      rotated-frame coordinates back to original-frame coordinates.
    """
    center = ((img.width - 1) / 2.0, (img.height - 1) / 2.0)
    back = AffineTransform2D.rotation(-angle, center)
    return resample_affine(img, back, fill=0.0), back


def split_modalities(source, target, cfg):
    """Return (H&E, SHG) from images given in registration roles."""
    if cfg.direction == 'he_to_shg':
        return source, target
    return target, source


def preprocess_pair(he, shg, cfg):
    """Preprocess both modalities and order them as (source, target) per cfg.direction."""
    he_pre = preprocess_he(he.require_channels(3, 'H&E image'))
    shg_pre = preprocess_shg(shg.require_channels(1, 'SHG image'))
    if cfg.direction == 'he_to_shg':
        return he_pre, shg_pre
    return shg_pre, he_pre


def _scale_deviation(t):
    """
    Largest relative scale change of t or its inverse.

    Stricter than |1 - s| alone: a pull scale in [0.90, 0.909) is rejected
    because its inverse exceeds 1.1. A 1.3x zoom reads as 30% either way.
    """
    s_min, s_max = scale_factors(t)
    return max(abs(1.0 - s_min), abs(s_max - 1.0), abs(1.0 / s_min - 1.0), abs(1.0 / s_max - 1.0))


def evaluate_candidate(src, tgt, angle, resolution, matcher, cfg, logger=None):
    """
    Match one (angle, resolution) candidate and express it at full resolution.

    Parameters:
    - src, tgt (RasterImage): Preprocessed full-resolution images.
    - angle (float): Rotation applied to the source level, in degrees.
    - resolution (int): Size of the longer side of both levels.
    - matcher: Callable (img_a, img_b) -> MatchSet.
    - cfg (RegistrationConfig): Scale tolerance, inlier floor and RANSAC settings.
    - logger: Logger instance for logging.

    Returns:
    - CandidateResult: Never raises for matcher or RANSAC failures.
    """
    logger = get_logger(logger)
    src_level = resize_to_max_dim(src, resolution)
    tgt_level = resize_to_max_dim(tgt, resolution)
    rotated, rotation_back = rotate_image(src_level.image, angle)
    identity = AffineTransform2D.identity()

    try:
        matches = matcher(rotated, tgt_level.image)
    except (PluginError, GeometryError, InputError) as e:
        logger.warning(f"Matcher failed at angle {angle}, resolution {resolution}: {e}")
        return CandidateResult(angle, resolution, identity, 0, 0, False, f"matcher failed: {e}")

    try:
        level_transform, inliers = estimate_affine_ransac(
            matches, cfg.ransac_threshold, cfg.ransac_iterations, cfg.deterministic_seed)
        full = compose_affine(src_level.level_to_full(),
                              compose_affine(rotation_back,
                                             compose_affine(level_transform, tgt_level.full_to_level())))
        deviation = _scale_deviation(full)
    except GeometryError as e:
        logger.debug(f"Candidate angle {angle}, resolution {resolution}: {e}")
        return CandidateResult(angle, resolution, identity, len(matches), 0, False, str(e))

    reason = None
    if deviation > cfg.scale_tolerance:
        reason = f"scale change {deviation * 100:.0f}% exceeds {cfg.scale_tolerance * 100:.0f}%"
    elif inliers < max(cfg.min_inliers, cfg.min_inlier_fraction * len(matches)):
        reason = f"too few inliers: {inliers} of {len(matches)} matches"
    accepted = reason is None
    logger.debug(f"Candidate angle {angle}, resolution {resolution}: "
                 f"{len(matches)} matches, {inliers} inliers, accepted={accepted}")
    return CandidateResult(angle, resolution, full, len(matches), inliers, accepted, reason)


def _angle_distance(angle):
    return abs(((angle + 180.0) % 360.0) - 180.0)


def select_candidate(candidates, select_by='inliers'):
    """Best accepted candidate, or None; ties prefer smaller |angle| then larger resolution."""
    accepted = [c for c in candidates if c.accepted]
    if not accepted:
        return None

    def key(c):
        count = c.inlier_count if select_by == 'inliers' else c.match_count
        return (-count, _angle_distance(c.angle), -c.resolution)

    return min(accepted, key=key)


def exhaustive_align(src_he, tgt_shg, cfg, matcher, logger=None, progress=False):
    """
    Exhaustive initial alignment of an H&E / SHG pair.

    Parameters:
    - src_he (RasterImage): RGB H&E image.
    - tgt_shg (RasterImage): Single-channel SHG image.
    - cfg (RegistrationConfig): Angle grid, resolutions and selection policy.
    - matcher: Callable (img_a, img_b) -> MatchSet.
    - logger: Logger instance for logging.
    - progress (bool): Show a progress bar over the candidate grid.

    Returns:
    - (AffineTransform2D, CandidateLog): Selected full-resolution transform
      (identity when nothing is accepted) and every evaluated candidate.
    """
    source, target = preprocess_pair(src_he, tgt_shg, cfg)
    return align_preprocessed(source, target, cfg, matcher, logger, progress)


def align_preprocessed(source, target, cfg, matcher, logger=None, progress=False):
    """Candidate grid search over an already preprocessed (source, target) pair."""
    logger = get_logger(logger)
    grid = [(float(angle), int(resolution)) for angle in cfg.angles for resolution in cfg.resolutions]
    logger.info(f"Evaluating {len(grid)} candidates ({len(cfg.angles)} angles x {len(cfg.resolutions)} resolutions)")

    def run(item):
        return evaluate_candidate(source, target, item[0], item[1], matcher, cfg, logger)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            iterator = pool.map(run, grid)
            results = list(track(iterator, total=len(grid), description="Candidates...") if progress else iterator)
    else:
        iterator = track(grid, description="Candidates...") if progress else grid
        results = [run(item) for item in iterator]

    results.sort(key=lambda c: (c.angle, c.resolution))
    best = select_candidate(results, cfg.select_by)
    log = CandidateLog(results, best)
    if best is None:
        logger.warning("No accepted candidate; falling back to the identity transform")
        return AffineTransform2D.identity(), log

    logger.info(f"Selected angle {best.angle}, resolution {best.resolution}: "
                f"{best.inlier_count} inliers of {best.match_count} matches")
    return best.transform, log
