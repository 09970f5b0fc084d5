"""
On-disk formats: images (PNG/TIFF, 8/16 bit), displacement fields (MMDF),
affine transforms (3x3 text), landmark CSVs and the ablation pairs manifest.
"""
from pathlib import Path

import cv2  # type: ignore
import numpy as np
import pandas as pd  # type: ignore
import tifffile  # type: ignore

from _errors import InputError
from _globals import FIELD_MAGIC, FIELD_VERSION
from core import AffineTransform2D, DisplacementField, LandmarkSet, RasterImage

TIFF_SUFFIXES = ('.tif', '.tiff')
PNG_SUFFIXES = ('.png',)
FIELD_HEADER_SIZE = len(FIELD_MAGIC) + 1 + 8
AFFINE_HEADER = ("mmreg affine: pull transform mapping target pixel (x, y) to source pixel (x, y)\n"
                 "origin at the center of the top-left pixel, x right, y down; row-major 3x3")
MANIFEST_COLUMNS = ['source', 'target', 'landmarks_source', 'landmarks_target']


def _suffix(path):
    return Path(path).suffix.lower()


def _to_unit_range(array, path):
    if array.dtype == np.uint8:
        return array.astype(np.float64) / 255.0
    if array.dtype == np.uint16:
        return array.astype(np.float64) / 65535.0
    if array.dtype == bool:
        return array.astype(np.float64)
    if np.issubdtype(array.dtype, np.floating):
        return np.clip(array.astype(np.float64), 0.0, 1.0)
    raise InputError(f"{path}: unsupported pixel type {array.dtype}")


def _to_channels_last(array, path):
    if array.ndim == 2:
        return array
    if array.ndim == 3 and array.shape[0] in (3, 4) and array.shape[2] not in (1, 2, 3, 4):
        array = np.moveaxis(array, 0, -1)
    if array.ndim == 3:
        if array.shape[2] in (1, 2):
            return array[..., 0]
        if array.shape[2] in (3, 4):
            return array[..., :3]
    raise InputError(f"{path}: unsupported image shape {array.shape}")


def _bgr_to_rgb(array):
    if array.shape[2] in (3, 4):
        return np.concatenate([array[..., 2::-1], array[..., 3:]], axis=-1)
    return array


def load_image(path):
    """
    Decode an 8- or 16-bit grayscale/RGB PNG or TIFF into [0, 1] intensities.

    Parameters:
    - path (str or Path): Image file.

    Returns:
    - RasterImage: One channel for grayscale, three for RGB (alpha dropped).

    Raises:
    - InputError: Missing, unsupported or corrupt file.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    suffix = _suffix(path)
    try:
        if suffix in TIFF_SUFFIXES:
            array = tifffile.imread(path)
        elif suffix in PNG_SUFFIXES:
            array = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
            if array is None:
                raise InputError(f"{path}: cannot decode image")
            if array.ndim == 3:
                array = _bgr_to_rgb(array)
        else:
            raise InputError(f"{path}: unsupported format {suffix or '(none)'}")
    except InputError:
        raise
    except Exception as e:
        raise InputError(f"{path}: cannot decode image ({e})")
    array = np.asarray(array)
    return RasterImage(_to_unit_range(_to_channels_last(array, path), path))


def save_image(img, path, bit_depth=16):
    """Encode as PNG or TIFF with 8- or 16-bit integer samples."""
    if bit_depth not in (8, 16):
        raise InputError(f"unsupported bit depth {bit_depth}")
    dtype, top = (np.uint8, 255.0) if bit_depth == 8 else (np.uint16, 65535.0)
    array = np.round(img.data * top).astype(dtype)
    suffix = _suffix(path)
    if suffix in TIFF_SUFFIXES:
        tifffile.imwrite(path, array, photometric='rgb' if img.channels == 3 else 'minisblack')
    elif suffix in PNG_SUFFIXES:
        if array.ndim == 3:
            array = np.ascontiguousarray(array[..., ::-1])
        if not cv2.imwrite(str(path), array):
            raise InputError(f"{path}: cannot encode image")
    else:
        raise InputError(f"{path}: unsupported format {suffix or '(none)'}")


def save_displacement_field(u, path):
    """
    Write the MMDF format: magic, version byte, little-endian uint32 (w, h),
    then float32 (dx, dy) per pixel in row-major order.
    """
    header = FIELD_MAGIC + bytes([FIELD_VERSION]) + np.array([u.width, u.height], dtype='<u4').tobytes()
    with open(path, 'wb') as f:
        f.write(header)
        f.write(np.ascontiguousarray(u.vectors, dtype='<f4').tobytes())


def load_displacement_field(path):
    """
    Read an MMDF file.

    Raises:
    - InputError: Magic/version mismatch, empty field or truncated payload.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"{path}: {e}")
    if len(raw) < FIELD_HEADER_SIZE:
        raise InputError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise InputError(f"{path}: magic mismatch")
    version = raw[len(FIELD_MAGIC)]
    if version != FIELD_VERSION:
        raise InputError(f"{path}: unsupported field version {version}")
    width, height = (int(v) for v in np.frombuffer(raw, dtype='<u4', count=2, offset=len(FIELD_MAGIC) + 1))
    if width == 0 or height == 0:
        raise InputError(f"{path}: empty field")
    expected = FIELD_HEADER_SIZE + 8 * width * height
    if len(raw) != expected:
        raise InputError(f"{path}: truncated field payload, expected {expected} bytes, got {len(raw)}")
    vectors = np.frombuffer(raw, dtype='<f4', offset=FIELD_HEADER_SIZE).reshape(height, width, 2)
    return DisplacementField(vectors.astype(np.float64))


def save_affine(t, path):
    np.savetxt(path, t.homogeneous(), fmt='%.17g', header=AFFINE_HEADER, encoding='utf-8')


def load_affine(path):
    try:
        matrix = np.loadtxt(path, comments='#', encoding='utf-8', ndmin=2)
    except (OSError, ValueError) as e:
        raise InputError(f"{path}: cannot read affine ({e})")
    if matrix.shape != (3, 3) or not np.allclose(matrix[2], [0.0, 0.0, 1.0]):
        raise InputError(f"{path}: expected a 3x3 homogeneous matrix with last row 0 0 1")
    return AffineTransform2D(matrix)


def load_landmarks(path):
    """
    Read a landmark CSV with header `x,y`.

    Raises:
    - InputError: Wrong header or a malformed row (reported with its line number).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except FileNotFoundError:
        raise InputError(f"{path}: file not found")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputError(f"{path}: malformed landmark file ({e})")
    frame.columns = [str(c).strip() for c in frame.columns]
    if list(frame.columns) != ['x', 'y']:
        raise InputError(f"{path}: expected header 'x,y', got {','.join(frame.columns)}")
    values = pd.DataFrame({c: pd.to_numeric(frame[c].str.strip(), errors='coerce') for c in ('x', 'y')})
    bad = values.isna().any(axis=1) | ~np.isfinite(values.to_numpy(dtype=np.float64)).all(axis=1)
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise InputError(f"{path}: malformed landmark row at line {line}")
    return LandmarkSet(values.to_numpy(dtype=np.float64).reshape(-1, 2))


def save_landmarks(landmarks, path):
    frame = pd.DataFrame(landmarks.points, columns=['x', 'y'])
    frame.to_csv(path, index=False, float_format='%.9f', lineterminator='\n', encoding='utf-8')


def load_pairs_manifest(path):
    """
    Read the ablation manifest: `source,target,landmarks_source,landmarks_target`
    plus an optional `subset` column. Relative paths resolve against the manifest.

    Returns:
    - list[dict]: One record per pair; empty landmark fields become None.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    except FileNotFoundError:
        raise InputError(f"{path}: file not found")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InputError(f"{path}: malformed manifest ({e})")
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: manifest missing column(s) {', '.join(missing)}")

    def resolve(value):
        value = value.strip()
        if not value:
            return None
        candidate = Path(value)
        return candidate if candidate.is_absolute() else path.parent / candidate

    records = []
    for row in frame.to_dict(orient='records'):
        record = {column: resolve(row[column]) for column in MANIFEST_COLUMNS}
        if record['source'] is None or record['target'] is None:
            raise InputError(f"{path}: every pair needs a source and a target")
        record['subset'] = (row.get('subset') or '').strip() or None
        records.append(record)
    return records
