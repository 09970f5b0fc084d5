"""
Registration quality: target registration error, folding diagnostics,
a landmark-based success proxy and the matcher ablation report.

All distances are in pixels.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd  # type: ignore
from scipy import ndimage  # type: ignore

from _errors import InputError, RegistrationError
from _logging import get_logger
from affine_search import exhaustive_align, split_modalities
from core import AffineTransform2D, DisplacementField, LandmarkSet

TRE_UNIT = 'px'
REPORT_COLUMNS = ['matcher', 'success', 'total', 'rate']


@dataclass(frozen=True)
class TreReport:
    per_point: tuple
    mean: float
    median: float
    max: float
    count: int
    excluded: int = 0

    def to_dict(self):
        return {
            'unit': TRE_UNIT,
            'count': self.count,
            'excluded': self.excluded,
            'mean': self.mean,
            'median': self.median,
            'max': self.max,
            'per_point': list(self.per_point),
        }


@dataclass(frozen=True)
class AblationRow:
    matcher_name: str
    success_count: int
    total: int

    @property
    def success_rate(self):
        return 100.0 * self.success_count / self.total if self.total else 0.0


@dataclass
class AblationPair:
    """One registration pair; landmarks are optional and live in their own image frames."""

    source: object
    target: object
    landmarks_source: Optional[LandmarkSet] = None
    landmarks_target: Optional[LandmarkSet] = None
    subset: Optional[str] = None
    name: str = field(default='')


def _outside(points, width, height):
    return ((points[:, 0] < 0) | (points[:, 0] > width - 1)
            | (points[:, 1] < 0) | (points[:, 1] > height - 1))


def transform_landmarks(landmarks_tgt, t, width=None, height=None):
    """
    Map target-frame landmarks into the source frame.

    Parameters:
    - landmarks_tgt (LandmarkSet): Points in the target frame.
    - t (AffineTransform2D or DisplacementField): Pull transform.
    - width, height (int or None): Target domain for affine transforms; fields use their own size.

    Returns:
    - LandmarkSet: Moved points; points outside the domain are flagged, not clamped.
    """
    points = landmarks_tgt.points
    flags = landmarks_tgt.out_of_bounds.copy()
    if isinstance(t, DisplacementField):
        flags |= _outside(points, t.width, t.height)
        coords = [points[:, 1], points[:, 0]]
        dx = ndimage.map_coordinates(t.vectors[..., 0], coords, order=1, mode='nearest')
        dy = ndimage.map_coordinates(t.vectors[..., 1], coords, order=1, mode='nearest')
        moved = points + np.column_stack([dx, dy])
    elif isinstance(t, AffineTransform2D):
        if width is not None and height is not None:
            flags |= _outside(points, width, height)
        moved = t.apply(points)
    else:
        raise InputError(f"cannot transform landmarks with {type(t).__name__}")
    return LandmarkSet(moved, flags)


def compute_tre(a, b):
    """
    Per-point Euclidean distances between paired landmark sets.

    Points flagged out of bounds in either set are excluded and counted.

    Raises:
    - InputError: On a length mismatch, empty sets, or no usable pair.
    """
    if len(a) != len(b):
        raise InputError(f"landmark count mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise InputError("empty landmark sets")
    usable = ~(a.out_of_bounds | b.out_of_bounds)
    if not np.any(usable):
        raise InputError("no landmark pair inside the domain")
    delta = a.points[usable] - b.points[usable]
    distances = np.hypot(delta[:, 0], delta[:, 1])
    return TreReport(
        per_point=tuple(float(d) for d in distances),
        mean=float(np.mean(distances)),
        median=float(np.median(distances)),
        max=float(np.max(distances)),
        count=int(usable.sum()),
        excluded=int((~usable).sum()),
    )


def jacobian_folding_report(u):
    """
    Jacobian determinant of p -> p + u(p) and the number of folded pixels.

    Central differences inside, one-sided differences at the borders.

    Returns:
    - (float, int): Minimum determinant and count of pixels with det <= 0.
    """
    if u.width < 2 or u.height < 2:
        raise InputError("folding report needs a field of at least 2x2")
    ddx_dy, ddx_dx = np.gradient(u.vectors[..., 0])
    ddy_dy, ddy_dx = np.gradient(u.vectors[..., 1])
    det = (1.0 + ddx_dx) * (1.0 + ddy_dy) - ddx_dy * ddy_dx
    return float(det.min()), int(np.count_nonzero(det <= 0))


def classify_success(tre_before, tre_after, threshold=1.0):
    """Success iff the mean TRE after registration is strictly below threshold x before."""
    return tre_after.mean < threshold * tre_before.mean


def _pair_success(pair, transform, log):
    if pair.landmarks_source is None or pair.landmarks_target is None:
        return not log.no_accepted_candidate
    before = compute_tre(pair.landmarks_target, pair.landmarks_source)
    moved = transform_landmarks(pair.landmarks_target, transform, pair.target.width, pair.target.height)
    after = compute_tre(moved, pair.landmarks_source)
    return classify_success(before, after)


def run_ablation(pairs, matchers, cfg, logger=None):
    """
    Success rate of each matcher over a set of pairs.

    Parameters:
    - pairs (list[AblationPair]): Registration pairs.
    - matchers (list): Matcher callables; each needs a `name` attribute.
    - cfg (RegistrationConfig): Search configuration shared by all runs.
    - logger: Logger instance for logging.

    Returns:
    - list[AblationRow]: One row per matcher, followed by one row per
      (matcher, subset) when pairs carry subset labels.
    """
    logger = get_logger(logger)
    if not pairs or not matchers:
        raise InputError("ablation needs at least one pair and one matcher")
    subsets = sorted({p.subset for p in pairs if p.subset})

    rows = []
    for matcher in matchers:
        name = getattr(matcher, 'name', type(matcher).__name__)
        outcomes = []
        for index, pair in enumerate(pairs):
            logger.info(f"Ablation [{name}] pair {index + 1}/{len(pairs)} {pair.name}")
            try:
                he, shg = split_modalities(pair.source, pair.target, cfg)
                transform, log = exhaustive_align(he, shg, cfg, matcher, logger)
                success = _pair_success(pair, transform, log)
            except RegistrationError as e:
                logger.error(f"Ablation [{name}] pair {pair.name or index} failed: {e}")
                success = False
            outcomes.append((pair.subset, success))

        rows.append(AblationRow(name, sum(ok for _, ok in outcomes), len(outcomes)))
        for subset in subsets:
            chosen = [ok for s, ok in outcomes if s == subset]
            rows.append(AblationRow(f"{name}[{subset}]", sum(chosen), len(chosen)))
    return rows


def ablation_table(rows):
    return pd.DataFrame(
        [[r.matcher_name, r.success_count, r.total, round(r.success_rate, 2)] for r in rows],
        columns=REPORT_COLUMNS,
    )


def write_ablation_csv(rows, path):
    ablation_table(rows).to_csv(path, index=False, lineterminator='\n')


def format_ablation_table(rows):
    return ablation_table(rows).to_string(index=False)
