"""
Keypoint detection, descriptor matching and robust affine fitting.

The built-in backend is OpenCV SIFT with mutual-nearest-neighbour matching
and Lowe's ratio test. Learned matchers run as external processes speaking
the MMREG/1 wire protocol (see `run_external_matcher`).
"""
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import List, Tuple

import cv2  # type: ignore
import numpy as np
from scipy.spatial.distance import cdist  # type: ignore
from skimage.measure import ransac  # type: ignore
from skimage.transform import AffineTransform  # type: ignore

from _errors import GeometryError, InputError, PluginError
from _globals import PLUGIN_HEADER
from _logging import get_logger
from core import AffineTransform2D


@dataclass(frozen=True, eq=False)
class Keypoint:
    position: Tuple[float, float]
    response: float
    descriptor: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True, eq=False)
class MatchSet:
    """One-to-one correspondences between two keypoint lists."""

    pairs: List[Tuple[int, int, float]]
    keypoints_a: List[Keypoint]
    keypoints_b: List[Keypoint]

    def __post_init__(self):
        seen_a, seen_b = set(), set()
        for index_a, index_b, confidence in self.pairs:
            if not (0 <= index_a < len(self.keypoints_a) and 0 <= index_b < len(self.keypoints_b)):
                raise GeometryError(f"match index out of range: ({index_a}, {index_b})")
            if not 0.0 <= confidence <= 1.0:
                raise GeometryError(f"match confidence {confidence} outside [0, 1]")
            if index_a in seen_a or index_b in seen_b:
                raise GeometryError("non-injective matching")
            seen_a.add(index_a)
            seen_b.add(index_b)

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def empty(cls):
        return cls([], [], [])

    def points_a(self):
        return np.array([self.keypoints_a[i].position for i, _, _ in self.pairs], dtype=np.float64).reshape(-1, 2)

    def points_b(self):
        return np.array([self.keypoints_b[j].position for _, j, _ in self.pairs], dtype=np.float64).reshape(-1, 2)


def detect_keypoints(img, max_count=2000):
    """
    Detect SIFT keypoints with unit-normalized descriptors.

    Parameters:
    - img (RasterImage): Preprocessed single-channel image.
    - max_count (int): Maximum number of keypoints to keep.

    Returns:
    - list[Keypoint]: Sorted by descending detector response.
    """
    img.require_channels(1, 'keypoint detection input')
    if np.ptp(img.data) == 0:
        return []
    image8 = np.round(img.data * 255.0).astype(np.uint8)
    sift = cv2.SIFT_create(nfeatures=max_count)
    cv_keypoints, descriptors = sift.detectAndCompute(image8, None)
    if descriptors is None or len(cv_keypoints) == 0:
        return []

    keypoints = []
    for kp, desc in zip(cv_keypoints, descriptors):
        norm = np.linalg.norm(desc)
        if norm == 0:
            continue
        x = min(max(float(kp.pt[0]), 0.0), img.width - 1.0)
        y = min(max(float(kp.pt[1]), 0.0), img.height - 1.0)
        keypoints.append(Keypoint((x, y), max(float(kp.response), 0.0), desc.astype(np.float64) / norm))
    # stable sort keeps OpenCV's order among equal responses
    keypoints.sort(key=lambda k: -k.response)
    return keypoints[:max_count]


def _nearest_two(distances):
    """Index of the nearest column plus nearest and second-nearest distances, per row."""
    nearest = np.argmin(distances, axis=1)
    d1 = distances[np.arange(len(distances)), nearest]
    if distances.shape[1] < 2:
        return nearest, d1, np.full_like(d1, np.inf)
    d2 = np.partition(distances, 1, axis=1)[:, 1]
    return nearest, d1, d2


def _ratio(d1, d2):
    with np.errstate(divide='ignore', invalid='ignore'):
        ratio = np.where(d2 > 0, d1 / d2, 1.0)
    return np.where(np.isinf(d2), 0.0, ratio)


def match_descriptors(a, b, ratio=0.8):
    """
    Mutual nearest-neighbour matching with a symmetric Lowe ratio test.

    A pair survives when each keypoint is the other's nearest neighbour and
    the nearest/second-nearest distance ratio is below `ratio` in both
    directions. Confidence is 1 minus the larger of the two ratios.
    """
    if not a or not b:
        return MatchSet([], list(a), list(b))
    desc_a = np.stack([k.descriptor for k in a])
    desc_b = np.stack([k.descriptor for k in b])
    distances = cdist(desc_a, desc_b)

    nn_ab, d1_ab, d2_ab = _nearest_two(distances)
    nn_ba, d1_ba, d2_ba = _nearest_two(distances.T)
    ratio_ab = _ratio(d1_ab, d2_ab)
    ratio_ba = _ratio(d1_ba, d2_ba)

    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] != i:
            continue
        worst = max(ratio_ab[i], ratio_ba[j])
        if worst < ratio:
            pairs.append((int(i), int(j), float(1.0 - worst)))
    return MatchSet(pairs, list(a), list(b))


def estimate_affine_ransac(m, inlier_threshold=3.0, iterations=2000, seed=0):
    """
    Robust affine fit over minimal 3-point samples with a least-squares refit.

    The model is estimated from keypoints_a (source) to keypoints_b (target)
    so the inlier test runs in target-frame pixels, then inverted to the
    pull transform target -> source.

    Parameters:
    - m (MatchSet): Correspondences.
    - inlier_threshold (float): Residual bound in target pixels.
    - iterations (int): Number of RANSAC trials.
    - seed (int): Seed for the sample generator.

    Returns:
    - (AffineTransform2D, int): Pull transform and the inlier count.

    Raises:
    - GeometryError: Fewer than 3 matches or no non-degenerate model.
    """
    if len(m) < 3:
        raise GeometryError(f"insufficient correspondences: {len(m)} < 3")
    source, target = m.points_a(), m.points_b()
    model, inliers = ransac((source, target), AffineTransform, min_samples=3,
                            residual_threshold=inlier_threshold, max_trials=iterations, rng=seed)
    if model is None or inliers is None or not np.any(inliers):
        raise GeometryError("all sampled models degenerate")
    forward = AffineTransform2D(model.params)
    return forward.inverse(), int(np.count_nonzero(inliers))


def _encode_images(img_a, img_b):
    for img, name in ((img_a, 'image A'), (img_b, 'image B')):
        img.require_channels(1, f"external matcher {name}")
    header = f"{PLUGIN_HEADER} {img_a.width} {img_a.height} {img_b.width} {img_b.height}\n"
    return (header.encode('ascii')
            + np.ascontiguousarray(img_a.data, dtype='<f4').tobytes()
            + np.ascontiguousarray(img_b.data, dtype='<f4').tobytes())


def _in_bounds(x, y, img):
    return 0.0 <= x <= img.width - 1 and 0.0 <= y <= img.height - 1


def _parse_matches(stdout, img_a, img_b):
    lines = stdout.decode('ascii', errors='replace').splitlines()
    if not lines:
        raise PluginError("malformed output: empty")
    head = lines[0].split()
    if len(head) != 2 or head[0] != 'MATCHES' or not head[1].isdigit():
        raise PluginError(f"malformed output header: {lines[0]!r}")
    count = int(head[1])
    if len(lines) - 1 < count:
        raise PluginError(f"malformed output: expected {count} match lines, got {len(lines) - 1}")

    index_a, index_b = {}, {}
    keypoints_a, keypoints_b, pairs = [], [], []
    for number, line in enumerate(lines[1:count + 1], start=2):
        fields = line.split()
        try:
            xa, ya, xb, yb, conf = (float(v) for v in fields)
        except ValueError:
            raise PluginError(f"malformed match at output line {number}: {line!r}")
        if not all(np.isfinite([xa, ya, xb, yb, conf])):
            raise PluginError(f"non-finite value at output line {number}")
        if not (_in_bounds(xa, ya, img_a) and _in_bounds(xb, yb, img_b)):
            raise PluginError(f"match outside image bounds at output line {number}")
        if (xa, ya) not in index_a:
            index_a[(xa, ya)] = len(keypoints_a)
            keypoints_a.append(Keypoint((xa, ya), conf))
        if (xb, yb) not in index_b:
            index_b[(xb, yb)] = len(keypoints_b)
            keypoints_b.append(Keypoint((xb, yb), conf))
        pairs.append((index_a[(xa, ya)], index_b[(xb, yb)], conf))
    try:
        return MatchSet(pairs, keypoints_a, keypoints_b)
    except GeometryError as e:
        raise PluginError(str(e))


def run_external_matcher(img_a, img_b, plugin, timeout=60.0, logger=None):
    """
    Match two images with an external process over the MMREG/1 protocol.

    Parameters:
    - img_a, img_b (RasterImage): Single-channel images in [0, 1].
    - plugin (str): Command line of the matcher executable.
    - timeout (float): Seconds before the process is killed.
    - logger: Logger instance for logging.

    Returns:
    - MatchSet: Validated one-to-one matches.

    Raises:
    - PluginError: Process failure, timeout or malformed output.
    """
    logger = get_logger(logger)
    args = shlex.split(plugin)
    if not args:
        raise InputError("empty matcher command line")
    payload = _encode_images(img_a, img_b)
    try:
        result = subprocess.run(args, input=payload, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, timeout=timeout)
    except subprocess.TimeoutExpired as e:
        stderr = (e.stderr or b'').decode('utf-8', errors='replace')
        raise PluginError(f"matcher timed out after {timeout}s", stderr)
    except OSError as e:
        raise PluginError(f"cannot start matcher {args[0]!r}: {e}")

    stderr = result.stderr.decode('utf-8', errors='replace')
    if result.returncode != 0:
        raise PluginError(f"matcher exited with code {result.returncode}: {stderr.strip()}", stderr)
    try:
        matches = _parse_matches(result.stdout, img_a, img_b)
    except PluginError as e:
        e.stderr = stderr
        raise
    logger.debug(f"External matcher returned {len(matches)} matches")
    return matches


class BuiltinMatcher:
    """SIFT detection plus mutual-NN ratio matching."""

    name = 'builtin'

    def __init__(self, max_keypoints=2000, ratio=0.8):
        self.max_keypoints = max_keypoints
        self.ratio = ratio

    def __call__(self, img_a, img_b, logger=None):
        keypoints_a = detect_keypoints(img_a, self.max_keypoints)
        keypoints_b = detect_keypoints(img_b, self.max_keypoints)
        get_logger(logger).debug(f"Detected {len(keypoints_a)} / {len(keypoints_b)} keypoints")
        return match_descriptors(keypoints_a, keypoints_b, self.ratio)


class ExternalMatcher:
    """Matcher delegating to an external process; each call owns its own child."""

    def __init__(self, command, timeout=60.0, name=None):
        self.command = command
        self.timeout = timeout
        self.name = name or f"external:{command}"

    def __call__(self, img_a, img_b, logger=None):
        return run_external_matcher(img_a, img_b, self.command, self.timeout, logger)


def make_matcher(selection, cfg=None, timeout=60.0):
    """
    Build a matcher from its textual selection.

    Parameters:
    - selection (str): 'builtin' or 'external:<command line>'.
    - cfg (RegistrationConfig or None): Source of keypoint cap and ratio.
    - timeout (float): Seconds allowed per external call.
    """
    if selection == 'builtin':
        if cfg is None:
            return BuiltinMatcher()
        return BuiltinMatcher(cfg.max_keypoints, cfg.match_ratio)
    if selection.startswith('external:') and selection[len('external:'):].strip():
        return ExternalMatcher(selection[len('external:'):].strip(), timeout, name=selection)
    raise InputError(f"unknown matcher {selection!r}; expected 'builtin' or 'external:<command>'")
