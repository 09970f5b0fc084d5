import cv2  # type: ignore
import numpy as np
import pytest
import tifffile  # type: ignore

from _errors import InputError
from core import AffineTransform2D, DisplacementField, LandmarkSet, RasterImage
from fileio import (
    load_affine,
    load_displacement_field,
    load_image,
    load_landmarks,
    load_pairs_manifest,
    save_affine,
    save_displacement_field,
    save_image,
    save_landmarks,
)


def test_load_8bit_png(tmp_path):
    path = tmp_path / 'gray.png'
    cv2.imwrite(str(path), np.array([[0, 255], [128, 255]], dtype=np.uint8))
    img = load_image(path)
    assert img.channels == 1
    assert img.data[0, 1] == 1.0 and img.data[0, 0] == 0.0


def test_load_16bit_tiff(tmp_path):
    path = tmp_path / 'shg.tif'
    tifffile.imwrite(path, np.array([[0, 65535]], dtype=np.uint16))
    assert load_image(path).data[0, 1] == 1.0


def test_load_rgba_png_drops_alpha(tmp_path):
    path = tmp_path / 'he.png'
    cv2.imwrite(str(path), np.full((4, 4, 4), 255, dtype=np.uint8))
    img = load_image(path)
    assert img.channels == 3


@pytest.mark.parametrize('suffix, bit_depth', [('.png', 8), ('.png', 16), ('.tif', 8), ('.tiff', 16)])
def test_image_round_trip(tmp_path, suffix, bit_depth):
    rng = np.random.default_rng(0)
    img = RasterImage(rng.random((9, 7, 3)))
    path = tmp_path / f"image{suffix}"
    save_image(img, path, bit_depth=bit_depth)
    loaded = load_image(path)
    assert loaded.shape == img.shape and loaded.channels == 3
    assert np.max(np.abs(loaded.data - img.data)) <= 1.0 / (2 * (2 ** bit_depth - 1)) + 1e-12


def test_load_image_errors(tmp_path):
    with pytest.raises(InputError, match='file not found'):
        load_image(tmp_path / 'missing.png')
    corrupt = tmp_path / 'corrupt.png'
    corrupt.write_bytes(b'not a png at all')
    with pytest.raises(InputError, match='corrupt.png'):
        load_image(corrupt)
    other = tmp_path / 'image.bmp'
    other.write_bytes(b'BM')
    with pytest.raises(InputError, match='unsupported format'):
        load_image(other)


def test_field_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    vectors = rng.standard_normal((5, 7, 2)).astype(np.float32).astype(np.float64)
    path = tmp_path / 'field.mmdf'
    save_displacement_field(DisplacementField(vectors), path)
    loaded = load_displacement_field(path)
    assert loaded.shape == (5, 7)
    np.testing.assert_array_equal(loaded.vectors, vectors)
    assert path.stat().st_size == 13 + 5 * 7 * 8
    assert path.read_bytes()[:5] == b'MMDF\x01'


def test_field_format_errors(tmp_path):
    empty = tmp_path / 'empty.mmdf'
    empty.write_bytes(b'MMDF\x01' + np.array([0, 4], dtype='<u4').tobytes())
    with pytest.raises(InputError, match='empty field'):
        load_displacement_field(empty)

    path = tmp_path / 'field.mmdf'
    save_displacement_field(DisplacementField.zeros(4, 3), path)
    truncated = tmp_path / 'truncated.mmdf'
    truncated.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(InputError, match='expected 109 bytes, got 99'):
        load_displacement_field(truncated)

    wrong = tmp_path / 'wrong.mmdf'
    wrong.write_bytes(b'XXXX' + path.read_bytes()[4:])
    with pytest.raises(InputError, match='magic mismatch'):
        load_displacement_field(wrong)


def test_affine_round_trip(tmp_path):
    t = AffineTransform2D(np.array([[0.1 + 0.2, -1 / 3, 12.75], [2 / 7, 1.0, -3.5]]))
    path = tmp_path / 'transform.txt'
    save_affine(t, path)
    assert path.read_text().startswith('# ')
    np.testing.assert_array_equal(load_affine(path).matrix, t.matrix)


def test_load_affine_rejects_non_affine(tmp_path):
    path = tmp_path / 'bad.txt'
    path.write_text('1 0 0\n0 1 0\n0.5 0 1\n')
    with pytest.raises(InputError):
        load_affine(path)


def test_load_landmarks(tmp_path):
    path = tmp_path / 'points.csv'
    path.write_text('x,y\n10.5,20.25\n')
    landmarks = load_landmarks(path)
    np.testing.assert_array_equal(landmarks.points, [[10.5, 20.25]])

    path.write_text('x,y\n')
    assert len(load_landmarks(path)) == 0

    path.write_text('x,y\n1,2\na,b\n')
    with pytest.raises(InputError, match='line 3'):
        load_landmarks(path)

    path.write_text('x,y\na,b\n')
    with pytest.raises(InputError, match='line 2'):
        load_landmarks(path)

    path.write_text('row,col\n1,2\n')
    with pytest.raises(InputError, match="header 'x,y'"):
        load_landmarks(path)


def test_landmarks_round_trip(tmp_path):
    points = np.array([[1.123456789, 2.5], [100.0, 0.000001]])
    path = tmp_path / 'points.csv'
    save_landmarks(LandmarkSet(points), path)
    assert path.read_bytes().startswith(b'x,y\n')
    np.testing.assert_allclose(load_landmarks(path).points, points, atol=1e-6)


def test_load_pairs_manifest(tmp_path):
    (tmp_path / 'data').mkdir()
    manifest = tmp_path / 'pairs.csv'
    manifest.write_text('source,target,landmarks_source,landmarks_target,subset\n'
                        'data/a_he.png,data/a_shg.png,data/a_src.csv,data/a_tgt.csv,train\n'
                        'data/b_he.png,data/b_shg.png,,,val\n')
    records = load_pairs_manifest(manifest)
    assert len(records) == 2
    assert records[0]['source'] == tmp_path / 'data' / 'a_he.png'
    assert records[0]['subset'] == 'train'
    assert records[1]['landmarks_source'] is None and records[1]['landmarks_target'] is None


def test_load_pairs_manifest_requires_columns(tmp_path):
    manifest = tmp_path / 'pairs.csv'
    manifest.write_text('source,target\na.png,b.png\n')
    with pytest.raises(InputError, match='landmarks_source'):
        load_pairs_manifest(manifest)
