import numpy as np
import pytest

from _errors import DivergenceError, InputError
from affine_search import resample_affine
from conftest import make_texture
from core import (
    AffineTransform2D,
    DisplacementField,
    LevelConfig,
    RasterImage,
    RegistrationConfig,
    compose_affine,
    pixel_grid,
)
from deformable import (
    bake_affine_to_field,
    diffusive_regularization,
    instance_optimize,
    level_objective,
    local_mutual_information,
    upsample_field,
    warp_image,
)
from evaluation import compute_tre, jacobian_folding_report, transform_landmarks
from preprocess import preprocess_he, preprocess_shg
from synthetic import make_synthetic_pair


def _entropy(values):
    _, counts = np.unique(values, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _single_level(**overrides):
    settings = dict(iterations=10, mi_window=32, mi_stride=16, downsample=1)
    settings.update(overrides)
    return RegistrationConfig(levels=(LevelConfig(**settings),), deformable_resolution=64)


def test_warp_zero_field_is_identity(texture):
    warped = warp_image(texture, DisplacementField.zeros(texture.width, texture.height))
    np.testing.assert_allclose(warped.data, texture.data, atol=1e-12)


def test_warp_integer_shift_pulls_content(texture):
    u = DisplacementField(np.tile([1.0, 0.0], (texture.height, texture.width, 1)))
    warped = warp_image(texture, u)
    np.testing.assert_allclose(warped.data[:, :-1], texture.data[:, 1:], atol=1e-12)


def test_warp_half_pixel():
    img = RasterImage(np.array([[0.0, 1.0]]))
    u = DisplacementField(np.array([[[0.5, 0.0], [0.5, 0.0]]]))
    assert warp_image(img, u).data[0, 0] == pytest.approx(0.5)


def test_warp_rgb_and_size_mismatch(texture):
    rgb = RasterImage(np.stack([texture.data] * 3, axis=-1))
    assert warp_image(rgb, DisplacementField.zeros(texture.width, texture.height)).channels == 3
    with pytest.raises(InputError):
        warp_image(texture, DisplacementField.zeros(4, 4))


def test_local_mi_of_image_with_itself_is_its_entropy():
    bins = 8
    rng = np.random.default_rng(0)
    data = rng.integers(0, bins, (32, 32)) / (bins - 1)
    img = RasterImage(data)
    value, _ = local_mutual_information(img, img, bins=bins, window=32, stride=32)
    assert value == pytest.approx(_entropy(data), rel=1e-6)


def test_local_mi_with_constant_image_is_zero(texture):
    constant = RasterImage(np.full(texture.shape, 0.5))
    value, _ = local_mutual_information(constant, texture, bins=16, window=32, stride=16)
    assert abs(value) < 1e-9


def test_local_mi_two_level_oracle():
    a = np.array([[0, 0, 1, 1]] * 4, dtype=np.float64)
    b = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [0, 1, 0, 1], [1, 0, 1, 0]], dtype=np.float64)
    joint = np.zeros((2, 2))
    for va, vb in zip(a.ravel().astype(int), b.ravel().astype(int)):
        joint[va, vb] += 1
    joint /= joint.sum()
    outer = joint.sum(axis=1)[:, None] * joint.sum(axis=0)[None, :]
    expected = float(np.sum(joint[joint > 0] * np.log(joint[joint > 0] / outer[joint > 0])))
    value, _ = local_mutual_information(RasterImage(a), RasterImage(b), bins=16, window=4, stride=4)
    assert value == pytest.approx(expected, abs=0.05)


def test_local_mi_gradient_matches_finite_differences():
    bins, eps = 8, 1e-5
    rng = np.random.default_rng(1)
    a = rng.uniform(0.05, 0.95, (16, 16))
    b = rng.uniform(0.05, 0.95, (16, 16))
    _, grad = local_mutual_information(RasterImage(a), RasterImage(b), bins=bins, window=8, stride=4)
    fraction = a * (bins - 1) - np.floor(a * (bins - 1))
    checked = 0
    for y, x in zip(*np.nonzero((fraction > 0.01) & (fraction < 0.99))):
        plus, minus = a.copy(), a.copy()
        plus[y, x] += eps
        minus[y, x] -= eps
        f_plus, _ = local_mutual_information(RasterImage(plus), RasterImage(b), bins=bins, window=8, stride=4)
        f_minus, _ = local_mutual_information(RasterImage(minus), RasterImage(b), bins=bins, window=8, stride=4)
        assert (f_plus - f_minus) / (2 * eps) == pytest.approx(grad[y, x], rel=1e-3, abs=1e-7)
        checked += 1
        if checked == 20:
            break
    assert checked == 20


def test_local_mi_rejects_bad_inputs(texture):
    with pytest.raises(InputError):
        local_mutual_information(texture, RasterImage(np.zeros((8, 8))))
    with pytest.raises(InputError):
        local_mutual_information(texture, texture, window=texture.width + 1)


def test_diffusive_regularization():
    assert diffusive_regularization(DisplacementField.zeros(5, 5))[0] == 0.0
    constant = DisplacementField(np.tile([5.0, -3.0], (6, 6, 1)))
    assert diffusive_regularization(constant)[0] == 0.0

    n = 7
    xs, _ = pixel_grid(n, n)
    ramp = DisplacementField(np.stack([xs, np.zeros_like(xs)], axis=-1))
    assert diffusive_regularization(ramp)[0] == pytest.approx((n - 1) * n / n ** 2)


def test_diffusive_gradient_is_exact():
    rng = np.random.default_rng(2)
    vectors = rng.standard_normal((5, 6, 2))
    _, grad = diffusive_regularization(DisplacementField(vectors))
    direction = rng.standard_normal(vectors.shape)
    eps = 1e-4
    f_plus = diffusive_regularization(DisplacementField(vectors + eps * direction))[0]
    f_minus = diffusive_regularization(DisplacementField(vectors - eps * direction))[0]
    assert (f_plus - f_minus) / (2 * eps) == pytest.approx(np.sum(grad * direction), rel=1e-6)


def test_upsample_field():
    zero = upsample_field(DisplacementField.zeros(4, 4), 8, 8)
    assert zero.shape == (8, 8) and np.all(zero.vectors == 0.0)

    constant = upsample_field(DisplacementField(np.tile([1.0, 0.0], (4, 4, 1))), 8, 8)
    np.testing.assert_allclose(constant.vectors[..., 0], 2.0)
    np.testing.assert_allclose(constant.vectors[..., 1], 0.0)

    xs, _ = pixel_grid(8, 8)
    ramp = upsample_field(DisplacementField(np.stack([xs, np.zeros_like(xs)], axis=-1)), 16, 16)
    new_xs, _ = pixel_grid(16, 16)
    # old x = (X + 0.5) / 2 - 0.5, doubled into the finer pixel units
    np.testing.assert_allclose(ramp.vectors[1:-1, 1:-1, 0], new_xs[1:-1, 1:-1] - 0.5, atol=1e-9)

    with pytest.raises(InputError):
        upsample_field(DisplacementField.zeros(8, 8), 4, 4)


def test_bake_affine_to_field():
    assert np.all(bake_affine_to_field(AffineTransform2D.identity(), 3, 3).vectors == 0.0)
    shifted = bake_affine_to_field(AffineTransform2D.translation(3, 4), 5, 2)
    np.testing.assert_allclose(shifted.vectors[..., 0], 3.0)
    np.testing.assert_allclose(shifted.vectors[..., 1], 4.0)

    turned = bake_affine_to_field(AffineTransform2D.rotation(90.0, (1.0, 1.0)), 3, 3)
    for y in range(3):
        for x in range(3):
            # (x, y) -> (2 - y, x)
            np.testing.assert_allclose(turned.vectors[y, x], [2 - y - x, x - y], atol=1e-12)


def test_warp_of_baked_affine_matches_resample_affine(texture):
    t = compose_affine(AffineTransform2D.rotation(12.0, (63.5, 63.5)), AffineTransform2D.translation(3.5, -2.25))
    baked = warp_image(texture, bake_affine_to_field(t, texture.width, texture.height))
    np.testing.assert_allclose(baked.data, resample_affine(texture, t).data, atol=1e-6)


def test_local_mi_is_symmetric():
    a = make_texture(seed=1, size=64)
    b = make_texture(seed=2, size=64)
    forward, _ = local_mutual_information(a, b)
    backward, _ = local_mutual_information(b, a)
    assert forward == pytest.approx(backward, abs=1e-9)


@pytest.mark.parametrize('seed', range(20))
def test_level_objective_gradient_matches_central_differences(seed):
    bins, eps = 8, 1e-4
    rng = np.random.default_rng(seed)
    src = make_texture(seed=2 * seed, size=16, sigma=1.0)
    tgt = make_texture(seed=2 * seed + 1, size=16, sigma=1.0)
    base = np.zeros((16, 16, 2))
    # samples stay between pixel centers; pixels next to a Parzen bin edge are held fixed
    v = rng.uniform(0.2, 0.8, (16, 16, 2))
    position = warp_image(src, DisplacementField(v)).data * (bins - 1)
    smooth = np.abs(position - np.round(position)) > 0.1
    direction = rng.uniform(-1.0, 1.0, v.shape) * smooth[..., None]
    args = (0.5, bins, 8, 4)
    _, _, _, grad = level_objective(src.data, tgt.data, base, v, *args)
    f_plus = level_objective(src.data, tgt.data, base, v + eps * direction, *args)[2]
    f_minus = level_objective(src.data, tgt.data, base, v - eps * direction, *args)[2]
    assert (f_plus - f_minus) / (2 * eps) == pytest.approx(np.sum(grad * direction), rel=1e-3)


def test_instance_optimize_identical_images_stay_put():
    img = make_texture(seed=5, size=64, sigma=2.0)
    field, trace = instance_optimize(img, img, AffineTransform2D.identity(), RegistrationConfig())
    assert field.shape == img.shape
    assert field.magnitude().max() < 0.5
    assert {entry.level for entry in trace} == {0, 1, 2}
    for level in range(3):
        similarity = [entry.similarity for entry in trace if entry.level == level]
        assert all(later >= earlier for earlier, later in zip(similarity, similarity[1:]))
        assert max(abs(value - similarity[0]) for value in similarity) < 1e-6
    for entry in trace:
        assert entry.total == pytest.approx(-entry.similarity + entry.theta * entry.regularity)


def test_instance_optimize_large_theta_stays_on_affine():
    img = make_texture(seed=6, size=64, sigma=2.0)
    init = AffineTransform2D.translation(2.0, 1.0)
    cfg = RegistrationConfig(levels=tuple(LevelConfig(theta=1e6, downsample=d) for d in (4, 2, 1)))
    field, _ = instance_optimize(img, img, init, cfg)
    affine_only = bake_affine_to_field(init, img.width, img.height)
    assert np.max(np.abs(field.vectors - affine_only.vectors)) < 0.1


def test_instance_optimize_never_increases_the_loss():
    src = make_texture(seed=7, size=64, sigma=2.0)
    tgt = make_texture(seed=8, size=64, sigma=2.0)
    _, trace = instance_optimize(src, tgt, AffineTransform2D.identity(), RegistrationConfig())
    for level in range(3):
        totals = [entry.total for entry in trace if entry.level == level]
        assert 1 <= len(totals) <= 100
        assert all(later < earlier for earlier, later in zip(totals, totals[1:]))


def test_instance_optimize_regularization_smooths_field():
    src = make_texture(seed=7, size=64, sigma=2.0)
    tgt = make_texture(seed=8, size=64, sigma=2.0)
    _, loose = instance_optimize(src, tgt, AffineTransform2D.identity(), _single_level(theta=0.0, iterations=20))
    _, stiff = instance_optimize(src, tgt, AffineTransform2D.identity(), _single_level(theta=1e6, iterations=20))
    assert stiff[-1].regularity < loose[-1].regularity


def test_instance_optimize_recovers_sinusoidal_field():
    size = 128
    src = make_texture(seed=3, size=size, sigma=3.0)
    xs, ys = pixel_grid(size, size)
    truth = DisplacementField(np.stack([4.0 * np.sin(2 * np.pi * ys / size), 4.0 * np.sin(2 * np.pi * xs / size)], axis=-1))
    tgt = warp_image(src, truth)

    field, _ = instance_optimize(src, tgt, AffineTransform2D.identity(), RegistrationConfig(deformable_resolution=size))

    checkpoints = np.linspace(16, size - 17, 5).astype(int)
    before = np.mean([np.hypot(*truth.vectors[y, x]) for y in checkpoints for x in checkpoints])
    after = np.mean([np.hypot(*(field.vectors[y, x] - truth.vectors[y, x])) for y in checkpoints for x in checkpoints])
    assert after <= 0.5 * before
    assert jacobian_folding_report(field)[1] == 0


def test_instance_optimize_recovers_synthetic_deformation():
    pair = make_synthetic_pair(seed=1, size=512, deform_amplitude=5.0)
    source, target = preprocess_he(pair.he), preprocess_shg(pair.shg)

    field, _ = instance_optimize(source, target, AffineTransform2D.identity(), RegistrationConfig())

    before = compute_tre(pair.landmarks_target, pair.landmarks_source)
    after = compute_tre(transform_landmarks(pair.landmarks_target, field), pair.landmarks_source)
    assert after.mean <= 0.5 * before.mean
    assert jacobian_folding_report(field)[1] == 0


def test_instance_optimize_rejects_mismatched_images(texture):
    with pytest.raises(InputError):
        instance_optimize(texture, RasterImage(np.zeros((16, 16))), AffineTransform2D.identity(), _single_level())


def test_instance_optimize_reports_divergence(monkeypatch):
    img = make_texture(seed=9, size=32)
    monkeypatch.setattr('deformable._local_mi', lambda a, b, *args: (float('nan'), np.zeros_like(a)))
    with pytest.raises(DivergenceError) as excinfo:
        instance_optimize(img, img, AffineTransform2D.identity(), _single_level())
    assert (excinfo.value.level, excinfo.value.iteration) == (0, 0)
