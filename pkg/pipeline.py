import json
import os
import time

import numpy as np

from _logging import get_logger
from affine_search import align_preprocessed, preprocess_pair, resample_affine, split_modalities
from core import AffineTransform2D, DisplacementField, RasterImage, pixel_grid
from deformable import bake_affine_to_field, instance_optimize, warp_into_frame
from evaluation import jacobian_folding_report
from features import make_matcher
from fileio import save_affine, save_displacement_field, save_image

TRANSFORM_FILE = 'transform.txt'
FIELD_FILE = 'field.mmdf'
REPORT_FILE = 'report.json'
OVERLAY_FILE = 'overlay.png'


def compose_affine_with_field(t, v):
    """Field of p -> t(p + v(p)), i.e. a residual field followed by an affine."""
    xs, ys = pixel_grid(v.width, v.height)
    moved = np.column_stack([(xs + v.vectors[..., 0]).ravel(), (ys + v.vectors[..., 1]).ravel()])
    mapped = t.apply(moved).reshape(v.height, v.width, 2)
    return DisplacementField(mapped - np.stack([xs, ys], axis=-1))


def deformable_refinement(source, target, transform, cfg, logger=None):
    """
    Run instance optimization from the initial affine.

    Images of different sizes are first resampled into the target frame, so
    the optimized residual is composed with the affine afterwards.

    Returns:
    - (DisplacementField, list[ObjectiveBreakdown]): Target-frame field and trace.
    """
    if source.shape == target.shape:
        return instance_optimize(source, target, transform, cfg, logger)
    moved = resample_affine(source, transform, target.width, target.height, fill=0.0)
    residual, trace = instance_optimize(moved, target, AffineTransform2D.identity(), cfg, logger)
    return compose_affine_with_field(transform, residual), trace


def write_overlay(source, target, u, path):
    """Registered source in red, target in green, as an 8-bit PNG."""
    warped = warp_into_frame(source, u)
    rgb = np.stack([warped.data, target.data, np.zeros_like(target.data)], axis=-1)
    save_image(RasterImage(rgb), path, bit_depth=8)


def _trace_summary(trace):
    levels = []
    for level in sorted({entry.level for entry in trace}):
        entries = [entry for entry in trace if entry.level == level]
        levels.append({'level': level, 'iterations': len(entries),
                       'first': entries[0].to_dict(), 'last': entries[-1].to_dict()})
    return {'iterations': len(trace), 'levels': levels}


def register_pair(source, target, config, out_dir, initial_only=False, seed=None, logger=None, progress=False):
    """
    Full registration run: exhaustive initial alignment, optional deformable
    refinement, then the transform, field, report and overlay files.

    Parameters:
    - source, target (RasterImage): Images in registration roles (see config.direction).
    - config (PipelineConfig): Parsed configuration document.
    - out_dir (str): Output directory, created when missing.
    - initial_only (bool): Skip the deformable stage.
    - seed (int or None): Overrides deterministic_seed.
    - logger: Logger instance for logging.
    - progress (bool): Show a progress bar over the candidate grid.

    Returns:
    - dict: The run report also written to report.json.
    """
    logger = get_logger(logger)
    cfg = config.to_registration_config()
    if seed is not None:
        cfg = cfg.model_copy(update={'deterministic_seed': seed})
    os.makedirs(out_dir, exist_ok=True)
    matcher = make_matcher(config.matcher, cfg, config.matcher_timeout)
    he, shg = split_modalities(source, target, cfg)

    started = time.perf_counter()
    source_pre, target_pre = preprocess_pair(he, shg, cfg)
    transform, log = align_preprocessed(source_pre, target_pre, cfg, matcher, logger, progress)
    timings = {'initial_alignment_s': time.perf_counter() - started}

    trace = []
    if initial_only or not config.deformable_enabled:
        logger.info("Deformable stage disabled; writing the affine as a dense field")
        field = bake_affine_to_field(transform, target.width, target.height)
    else:
        started = time.perf_counter()
        field, trace = deformable_refinement(source_pre, target_pre, transform, cfg, logger)
        timings['deformable_s'] = time.perf_counter() - started

    save_affine(transform, os.path.join(out_dir, TRANSFORM_FILE))
    save_displacement_field(field, os.path.join(out_dir, FIELD_FILE))
    write_overlay(source_pre, target_pre, field, os.path.join(out_dir, OVERLAY_FILE))

    min_det, folded = jacobian_folding_report(field) if min(field.shape) >= 2 else (None, 0)
    report = {
        'direction': cfg.direction,
        'matcher': getattr(matcher, 'name', config.matcher),
        'seed': cfg.deterministic_seed,
        'no_accepted_candidate': log.no_accepted_candidate,
        'selected': log.selected.to_dict() if log.selected is not None else None,
        'transform': transform.to_list(),
        'candidates': [c.to_dict() for c in log],
        'accepted_count': sum(1 for c in log if c.accepted),
        'deformable': bool(trace),
        'objective': _trace_summary(trace),
        'folding': {'min_jacobian_det': min_det, 'folded_pixels': folded},
        'timings': timings,
    }
    with open(os.path.join(out_dir, REPORT_FILE), 'w', encoding='utf-8') as f:
        json.dump(report, f, indent=2)
    logger.info(f"Registration outputs written to '{out_dir}'")
    return report
