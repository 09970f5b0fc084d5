"""
Multilevel instance optimization of a dense displacement field.

Loss per level: -LocalMI(S o u, T) + theta * Reg(v), where u = a + v, a is the
baked initial affine and v the optimized residual. LocalMI uses joint
histograms smoothed with a triangular (linear B-spline) Parzen kernel, so its
gradient is exact; Reg is the diffusive penalty.

Each step starts from the torch.optim.Adam update for the analytic gradient,
smooths it with a Gaussian and halves it until the loss drops, so the loss
never increases within a level.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch  # type: ignore
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage  # type: ignore
from skimage.transform import resize  # type: ignore

from _errors import DivergenceError, InputError
from _logging import get_logger
from core import DisplacementField, RasterImage, compose_affine, pixel_grid
from preprocess import PyramidLevel, resize_to_shape

MAX_HALVINGS = 6
ARMIJO = 1e-4
COINCIDENCE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ObjectiveBreakdown:
    similarity: float
    regularity: float
    total: float
    level: int
    iteration: int
    theta: float

    def to_dict(self):
        return asdict(self)


def warp_image(img, u):
    """
    Pull-warp: output(p) = img sampled bilinearly at p + u(p), edge-clamped.

    Raises:
    - InputError: If the field and image sizes differ.
    """
    if u.shape != img.shape:
        raise InputError(f"field size {u.width}x{u.height} does not match image size {img.width}x{img.height}")
    return warp_into_frame(img, u)


def warp_into_frame(img, u):
    """Pull-warp onto the field's grid; the source image may have any size."""
    xs, ys = pixel_grid(u.width, u.height)
    coords = [ys + u.vectors[..., 1], xs + u.vectors[..., 0]]
    if img.channels == 1:
        return RasterImage.from_array(ndimage.map_coordinates(img.data, coords, order=1, mode='nearest'))
    channels = [ndimage.map_coordinates(img.data[..., c], coords, order=1, mode='nearest') for c in range(3)]
    return RasterImage.from_array(np.stack(channels, axis=-1))


def _sample_bilinear(data, vectors):
    """Edge-clamped bilinear samples of `data` at p + vectors, with their spatial derivatives."""
    height, width = data.shape
    xs, ys = pixel_grid(width, height)
    x_raw = xs + vectors[..., 0]
    y_raw = ys + vectors[..., 1]
    x = np.clip(x_raw, 0.0, width - 1.0)
    y = np.clip(y_raw, 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0

    i00, i10 = data[y0, x0], data[y0, x1]
    i01, i11 = data[y1, x0], data[y1, x1]
    values = (1 - fx) * (1 - fy) * i00 + fx * (1 - fy) * i10 + (1 - fx) * fy * i01 + fx * fy * i11
    grad_x = (1 - fy) * (i10 - i00) + fy * (i11 - i01)
    grad_y = (1 - fx) * (i01 - i00) + fx * (i11 - i10)
    # clamped coordinates do not move with the field
    grad_x = np.where((x_raw < 0) | (x_raw > width - 1), 0.0, grad_x)
    grad_y = np.where((y_raw < 0) | (y_raw > height - 1), 0.0, grad_y)
    return values, grad_x, grad_y


def _window_starts(length, window, stride):
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return np.array(starts)


def _parzen_bins(values, bins):
    position = np.clip(values, 0.0, 1.0) * (bins - 1)
    lower = np.minimum(np.floor(position).astype(np.int64), bins - 2)
    return lower, position - lower


def _windows(data, window, ys, xs):
    view = sliding_window_view(data, (window, window))
    return view[ys[:, None], xs[None, :]].reshape(len(ys) * len(xs), window * window)


def _local_mi(a, b, bins, window, stride):
    height, width = a.shape
    ys = _window_starts(height, window, stride)
    xs = _window_starts(width, window, stride)
    wa = _windows(a, window, ys, xs)
    wb = _windows(b, window, ys, xs)
    count, n = wa.shape
    ka, fa = _parzen_bins(wa, bins)
    kb, fb = _parzen_bins(wb, bins)

    base = (np.arange(count) * bins * bins)[:, None]
    joint = np.zeros(count * bins * bins)
    for da, weight_a in ((0, 1 - fa), (1, fa)):
        for db, weight_b in ((0, 1 - fb), (1, fb)):
            index = base + (ka + da) * bins + (kb + db)
            joint += np.bincount(index.ravel(), weights=(weight_a * weight_b).ravel(), minlength=joint.size)
    joint = joint.reshape(count, bins, bins) / n
    pa = joint.sum(axis=2)
    pb = joint.sum(axis=1)

    occupied = joint > 0
    log_joint = np.log(np.where(occupied, joint, 1.0))
    log_pa = np.log(np.where(pa > 0, pa, 1.0))
    log_pb = np.log(np.where(pb > 0, pb, 1.0))
    pointwise = np.where(occupied, log_joint - log_pa[:, :, None] - log_pb[:, None, :], 0.0)
    per_window = (joint * pointwise).sum(axis=(1, 2))
    value = float(per_window.mean())

    # d MI / d a_p = (bins - 1) / n * sum_j wb_p[j] (G[ka+1, j] - G[ka, j])
    wid = np.arange(count)[:, None]
    step = (pointwise[wid, ka + 1, kb] - pointwise[wid, ka, kb]) * (1 - fb) \
        + (pointwise[wid, ka + 1, kb + 1] - pointwise[wid, ka, kb + 1]) * fb
    step *= (bins - 1) / (n * count)

    grad = np.zeros_like(a)
    step = step.reshape(len(ys), len(xs), window, window)
    for iy, y0 in enumerate(ys):
        for ix, x0 in enumerate(xs):
            grad[y0:y0 + window, x0:x0 + window] += step[iy, ix]
    return value, grad


def local_mutual_information(a, b, bins=16, window=64, stride=32):
    """
    Mean Parzen-smoothed mutual information over overlapping square windows.

    Parameters:
    - a, b (RasterImage): Single-channel images of equal size.
    - bins (int): Histogram bins per image.
    - window (int): Window side in pixels, at most min(width, height).
    - stride (int): Step between window origins; the last window is aligned to the border.

    Returns:
    - (float, numpy.ndarray): MI in nats and its gradient with respect to a's pixels.
    """
    if a.shape != b.shape:
        raise InputError(f"image sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")
    a.require_channels(1, 'MI input')
    b.require_channels(1, 'MI input')
    if bins < 2:
        raise InputError("MI needs at least 2 bins")
    if window > min(a.shape) or window < 1 or stride < 1:
        raise InputError(f"invalid MI window {window} / stride {stride} for image {a.width}x{a.height}")
    return _local_mi(a.data, b.data, bins, window, stride)


def _diffusive(vectors):
    count = vectors.shape[0] * vectors.shape[1]
    diff_x = vectors[:, 1:, :] - vectors[:, :-1, :]
    diff_y = vectors[1:, :, :] - vectors[:-1, :, :]
    value = (np.sum(diff_x ** 2) + np.sum(diff_y ** 2)) / count
    grad = np.zeros_like(vectors)
    grad[:, 1:, :] += 2 * diff_x / count
    grad[:, :-1, :] -= 2 * diff_x / count
    grad[1:, :, :] += 2 * diff_y / count
    grad[:-1, :, :] -= 2 * diff_y / count
    return float(value), grad


def diffusive_regularization(u):
    """
    Mean squared forward-difference gradient of both field components.

    Differences across the last row/column are zero (Neumann boundary).

    Returns:
    - (float, numpy.ndarray): Penalty and its gradient, shaped like u.vectors.
    """
    return _diffusive(u.vectors)


def upsample_field(u, new_w, new_h):
    """
    Bilinear upsampling with vectors rescaled into the new level's pixel units.

    Raises:
    - InputError: If either new dimension is smaller than the current one.
    """
    if new_w < u.width or new_h < u.height:
        raise InputError(f"cannot downsample field {u.width}x{u.height} to {new_w}x{new_h}")
    if (new_w, new_h) == (u.width, u.height):
        return u
    components = [resize(u.vectors[..., c], (new_h, new_w), order=1, mode='edge', anti_aliasing=False)
                  for c in range(2)]
    vectors = np.stack([components[0] * (new_w / u.width), components[1] * (new_h / u.height)], axis=-1)
    return DisplacementField(vectors)


def bake_affine_to_field(t, w, h):
    """Dense field u(p) = t(p) - p."""
    xs, ys = pixel_grid(w, h)
    m = t.matrix
    dx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2] - xs
    dy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2] - ys
    return DisplacementField(np.stack([dx, dy], axis=-1))


def level_objective(src, tgt, base, v, theta, bins, window, stride):
    """
    Loss and gradient of one level with respect to the residual field.

    Parameters:
    - src, tgt (numpy.ndarray): Single-channel level images.
    - base (numpy.ndarray): Fixed (h, w, 2) part of the displacement (baked affine).
    - v (numpy.ndarray): Optimized (h, w, 2) residual.
    - theta (float): Regularization weight.
    - bins, window, stride (int): Local MI settings.

    Returns:
    - (float, float, float, numpy.ndarray): similarity, regularity, total, gradient.
    """
    warped, grad_x, grad_y = _sample_bilinear(src, base + v)
    similarity, grad_mi = _local_mi(warped, tgt, bins, window, stride)
    regularity, grad_reg = _diffusive(v)
    total = -similarity + theta * regularity
    grad = -grad_mi[..., None] * np.stack([grad_x, grad_y], axis=-1) + theta * grad_reg
    return similarity, regularity, total, grad


def _level_size(width, height, downsample):
    return max(2, int(round(width / downsample))), max(2, int(round(height / downsample)))


def _smooth(update, sigma):
    if sigma <= 0:
        return update
    return np.stack([ndimage.gaussian_filter(update[..., c], sigma, mode='nearest') for c in range(2)], axis=-1)


def _propose(optimizer, parameter, v, grad, sigma):
    """Adam's per-parameter scaled step from v, Gaussian-smoothed."""
    parameter.data = torch.from_numpy(v.copy())
    parameter.grad = torch.from_numpy(grad)
    optimizer.step()
    return _smooth(parameter.detach().numpy() - v, sigma)


def _line_search(evaluate, v, proposal, current):
    """First of proposal, proposal / 2, ... that lowers the loss (Armijo), or None."""
    total, grad = current[2], current[3]
    slope = min(float(np.sum(grad * proposal)), 0.0)
    scale = 1.0
    for _ in range(MAX_HALVINGS + 1):
        trial = v + scale * proposal
        result = evaluate(trial)
        if result[2] < total + ARMIJO * scale * slope:
            return trial, result, scale
        scale *= 0.5
    return None


def _descend(evaluate, start, level, index, coincident, logger):
    """
    Monotone Adam descent on one level; every kept step lowers the loss.

    Returns:
    - (numpy.ndarray, list[ObjectiveBreakdown]): Final residual and the level's trace.
    """
    if level.iterations == 0:
        return start, []
    parameter = torch.nn.Parameter(torch.from_numpy(start.copy()))
    optimizer = torch.optim.Adam([parameter], lr=level.step_size)
    v = start.copy()
    current = evaluate(v, 0)
    trace = []
    for iteration in range(level.iterations):
        similarity, regularity, total, grad = current
        trace.append(ObjectiveBreakdown(similarity, regularity, total, index, iteration, level.theta))
        if iteration % 25 == 0:
            logger.debug(f"Level {index} iteration {iteration}: MI={similarity:.6f} Reg={regularity:.6f}")
        if coincident:
            logger.debug(f"Level {index}: warped source already equals the target")
            break

        def at_iteration(trial):
            return evaluate(trial, iteration)

        found = _line_search(at_iteration, v, _propose(optimizer, parameter, v, grad, level.smoothing), current)
        if found is None and iteration > 0:
            # retry once with fresh moment estimates
            optimizer = torch.optim.Adam([parameter], lr=optimizer.param_groups[0]['lr'])
            found = _line_search(at_iteration, v, _propose(optimizer, parameter, v, grad, level.smoothing), current)
        if found is None:
            logger.debug(f"Level {index} converged at iteration {iteration}")
            break

        v, current, scale = found
        group = optimizer.param_groups[0]
        group['lr'] = min(level.step_size, group['lr'] * scale * 2.0)

    return v, trace


def instance_optimize(src, tgt, init, cfg, logger=None):
    """
    Multilevel deformable registration starting from an affine initialization.

    Each level runs at most `iterations` monotone steps and stops early once
    no shortened step lowers the loss, or straight away when the warped
    source already reproduces the target.

    Parameters:
    - src, tgt (RasterImage): Preprocessed single-channel images of equal size.
    - init (AffineTransform2D): Initial pull transform at full resolution.
    - cfg (RegistrationConfig): Levels, optimizer settings and working resolution.
    - logger: Logger instance for logging.

    Returns:
    - (DisplacementField, list[ObjectiveBreakdown]): Full-resolution field with the
      affine composed in, and the per-iteration objective trace.

    Raises:
    - InputError: Mismatched or multi-channel images.
    - DivergenceError: Non-finite objective.
    """
    logger = get_logger(logger)
    src.require_channels(1, 'deformable source')
    tgt.require_channels(1, 'deformable target')
    if src.shape != tgt.shape:
        raise InputError(f"image sizes differ: {src.width}x{src.height} vs {tgt.width}x{tgt.height}")

    width, height = src.width, src.height
    ratio = min(1.0, cfg.deformable_resolution / max(width, height))
    work_w, work_h = max(2, int(round(width * ratio))), max(2, int(round(height * ratio)))

    trace = []
    residual = None
    for index, level in enumerate(cfg.levels):
        level_w, level_h = _level_size(work_w, work_h, level.downsample)
        geometry = PyramidLevel(resize_to_shape(src, level_w, level_h), level_w / width, width, height)
        src_level = geometry.image.data
        tgt_level = resize_to_shape(tgt, level_w, level_h).data
        to_level = geometry.full_to_level()
        level_affine = compose_affine(to_level, compose_affine(init, to_level.inverse()))
        base = bake_affine_to_field(level_affine, level_w, level_h).vectors

        if residual is None:
            residual = DisplacementField.zeros(level_w, level_h)
        else:
            residual = upsample_field(residual, max(level_w, residual.width), max(level_h, residual.height))
            if residual.shape != (level_h, level_w):
                raise InputError(f"level {index} is coarser than the previous level")

        window = min(level.mi_window, level_w, level_h)

        def evaluate(v, iteration):
            result = level_objective(src_level, tgt_level, base, v, level.theta, level.mi_bins, window, level.mi_stride)
            if not (np.isfinite(result[2]) and np.all(np.isfinite(result[3]))):
                raise DivergenceError(index, iteration)
            return result

        warped = _sample_bilinear(src_level, base + residual.vectors)[0]
        coincident = float(np.max(np.abs(warped - tgt_level))) <= COINCIDENCE_TOLERANCE
        logger.info(f"Level {index}: {level_w}x{level_h}, theta={level.theta}, up to {level.iterations} iterations")
        vectors, level_trace = _descend(evaluate, residual.vectors, level, index, coincident, logger)
        trace.extend(level_trace)
        residual = DisplacementField(vectors)

    field = bake_affine_to_field(init, width, height).vectors
    if residual is not None:
        field = field + upsample_field(residual, width, height).vectors
    logger.info(f"Instance optimization finished after {len(trace)} iterations")
    return DisplacementField(field), trace
