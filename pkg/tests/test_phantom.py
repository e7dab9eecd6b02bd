import numpy as np
import pytest
from scipy import ndimage

from rectiflow.phantom import (
    LESION_KINDS,
    gen_phantom,
    gen_vector_task,
    inject_lesion,
    make_lesion_cases,
    make_normals,
)


def test_phantom_deterministic():
    a, b = gen_phantom(11), gen_phantom(11)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.foreground, b.foreground)
    assert not np.array_equal(a.image, gen_phantom(12).image)


def test_phantom_range_and_background():
    for seed in range(20):
        p = gen_phantom(seed)
        assert p.image.dtype == np.float32
        assert p.image.min() >= 0 and p.image.max() <= 1
        assert np.all(p.image[~p.foreground] == 0)


def test_foreground_single_component():
    for seed in range(20):
        _, n = ndimage.label(gen_phantom(seed).foreground)
        assert n == 1


def test_foreground_fraction_envelope():
    fr = np.array([p.foreground.mean() for p in make_normals(1000, seed=3)])
    assert fr.min() > 0.3 and fr.max() < 0.7


def test_other_sizes():
    p = gen_phantom(0, size=32)
    assert p.image.shape == (32, 32)


# -- lesions -------------------------------------------------------------------------


def test_tiny_severity_barely_changes_image():
    p = gen_phantom(4)
    case = inject_lesion(p, seed=1, kind="bright-blob", severity=1e-6)
    assert np.abs(case.image - p.image).max() < 1e-5


def test_lesion_mask_inside_foreground_many_seeds():
    p = gen_phantom(5)
    rng = np.random.default_rng(0)
    for seed in range(10_000):
        kind = LESION_KINDS[seed % 3]
        case = inject_lesion(p, seed, kind, float(rng.uniform(0.05, 1)))
        assert case.gt_mask.any()
        assert not (case.gt_mask & ~p.foreground).any()


def test_lesion_changes_only_masked_pixels():
    p = gen_phantom(6)
    for kind in LESION_KINDS:
        case = inject_lesion(p, 3, kind, 0.8)
        np.testing.assert_array_equal(case.image[~case.gt_mask], p.image[~case.gt_mask])


def test_bright_blob_full_severity_not_darker():
    p = gen_phantom(7)
    case = inject_lesion(p, 2, "bright-blob", 1.0)
    assert np.all(case.image[case.gt_mask] >= p.image[case.gt_mask])


def test_lesion_argument_errors():
    p = gen_phantom(0)
    with pytest.raises(ValueError):
        inject_lesion(p, 0, "bright-blob", 0.0)
    with pytest.raises(ValueError, match="kind"):
        inject_lesion(p, 0, "spiky", 0.5)


def test_make_lesion_cases_cycles_kinds_and_is_seeded():
    a = make_lesion_cases(6, seed=1, severity_range=(0.5, 0.9))
    b = make_lesion_cases(6, seed=1, severity_range=(0.5, 0.9))
    assert [c.kind for c in a] == list(LESION_KINDS) * 2
    assert all(0.5 <= c.severity <= 0.9 for c in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)


# -- vector tasks --------------------------------------------------------------------


def test_gaussian_offset_difference_is_offset():
    x0, x1 = gen_vector_task("gaussian-offset", 500, seed=0, offset=(2.0, -1.0))
    # float32 storage of x1 + c rounds at the 1e-7 level
    np.testing.assert_allclose(x0 - x1, np.broadcast_to([2.0, -1.0], x0.shape), atol=1e-6)


def test_two_moons_jitter_scale():
    x0, x1 = gen_vector_task("two-moons-perturbed", 10_000, seed=1, jitter=0.2)
    mean_disp = np.linalg.norm(x0.astype(np.float64) - x1, axis=1).mean()
    assert abs(mean_disp - 0.2) < 0.05 * 0.2


def test_vector_task_determinism_and_errors():
    a = gen_vector_task("two-moons-perturbed", 50, seed=4)
    b = gen_vector_task("two-moons-perturbed", 50, seed=4)
    np.testing.assert_array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        gen_vector_task("spirals", 10, 0)
    with pytest.raises(ValueError):
        gen_vector_task("gaussian-offset", 0, 0)
