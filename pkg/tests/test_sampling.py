import itertools

import numpy as np
import pytest

from fracta.fracture import CompleteShape, random_fracture
from fracta.geometry import QUERY_HALF_SIDE
from fracta.sampling import (
    SURFACE_B,
    SURFACE_C,
    SURFACE_R,
    UNIFORM,
    SampleFormatError,
    SampleSet,
    SamplingError,
    draw_minibatch,
    load_samples,
    precompute_samples,
    quota,
    samples_from_bytes,
    samples_to_bytes,
    save_samples,
)


@pytest.fixture(scope="module")
def tup():
    return random_fracture(CompleteShape.analytic("sphere", radius=0.4), seed=5, grid_k=32)


@pytest.fixture(scope="module")
def samples(tup):
    return precompute_samples(tup, 5000, 0.01, seed=2)


def test_sample_set_structure(samples):
    assert len(samples) == 20_000
    for tag in (UNIFORM, SURFACE_C, SURFACE_B, SURFACE_R):
        assert (samples.source == tag).sum() == 5000
    assert samples.label_violations() == 0
    uniform = samples.points[samples.source == UNIFORM]
    assert np.abs(uniform).max() <= QUERY_HALF_SIDE


def test_labels_are_field_values_at_stored_points(tup, samples):
    p = samples.points
    np.testing.assert_array_equal(samples.labels[:, 0], tup.complete(p) >= 0.5)
    np.testing.assert_array_equal(samples.labels[:, 1], tup.break_shape(p) >= 0.5)
    np.testing.assert_array_equal(samples.labels[:, 2], tup.restoration(p) >= 0.5)
    np.testing.assert_array_equal(p, p.astype(np.float32))


def test_uniform_points_per_octant(samples):
    uniform = samples.points[samples.source == UNIFORM]
    n = len(uniform)
    octant = (uniform > 0).astype(int) @ [1, 2, 4]
    counts = np.bincount(octant, minlength=8)
    sd = np.sqrt(n * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - n / 8) < 5 * sd)


def test_surface_points_stay_near_their_surface(tup, samples):
    # sphere radius 0.4: surface-C offsets follow the jitter
    pc = samples.points[samples.source == SURFACE_C]
    dev = np.linalg.norm(pc, axis=1) - 0.4
    assert abs(dev.std() - 0.01) < 0.002


def test_zero_noise_points_are_outside_their_shape(tup):
    s = precompute_samples(tup, 2000, 0.0, seed=3)
    assert s.labels[s.source == SURFACE_C, 0].max() == 0
    assert s.labels[s.source == SURFACE_B, 1].max() == 0
    assert s.labels[(s.source != UNIFORM), 2].max() == 0
    assert s.label_violations() == 0


def test_determinism(tup):
    a = precompute_samples(tup, 1000, 0.01, seed=9)
    b = precompute_samples(tup, 1000, 0.01, seed=9)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = precompute_samples(tup, 1000, 0.01, seed=10)
    assert not np.array_equal(a.points, c.points)


@pytest.mark.parametrize("n,sigma", [(0, 0.01), (10, -0.1)])
def test_bad_parameters(tup, n, sigma):
    with pytest.raises(SamplingError):
        precompute_samples(tup, n, sigma)


def test_quota_is_ceiling():
    assert quota(2048) == 342
    assert quota(6) == 1


def check_batch(samples, batch, m):
    q = quota(m)
    assert len(batch) == m
    assert len(np.unique(batch.indices)) == m
    lab = samples.labels[batch.indices]
    for col, name in enumerate("CBR"):
        inside = int(lab[:, col].sum())
        assert inside >= q and m - inside >= q
        assert batch.inside_counts[name] == inside
        assert batch.outside_counts[name] == m - inside


def test_minibatch_quotas(samples):
    for seed in range(100):
        check_batch(samples, draw_minibatch(samples, 2048, seed=seed), 2048)


def test_minibatch_is_seeded(samples):
    a = draw_minibatch(samples, 512, seed=1)
    b = draw_minibatch(samples, 512, seed=1)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert not np.array_equal(a.indices, draw_minibatch(samples, 512, seed=2).indices)


def test_missing_stratum_is_named(samples):
    labels = samples.labels.copy()
    labels[:, 2] = 0
    labels[:, 0] = 0  # keep the labels consistent
    broken = SampleSet(samples.points, labels, samples.source)
    with pytest.raises(SamplingError, match="inside-R") as err:
        draw_minibatch(broken, 60)
    assert "inside-C" in str(err.value)


def test_m_larger_than_set(samples):
    with pytest.raises(SamplingError):
        draw_minibatch(samples, len(samples) + 1)


VALID = [(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 1)]


def test_m6_exhaustive_small_sets():
    # every multiset of six consistent label triples that covers all strata
    checked = 0
    for combo in itertools.combinations_with_replacement(range(4), 6):
        labels = np.array([VALID[i] for i in combo], dtype=np.uint8)
        if not all(0 < labels[:, c].sum() < 6 for c in range(3)):
            continue
        s = SampleSet(np.zeros((6, 3)), labels, np.zeros(6, np.uint8))
        for seed in range(5):
            check_batch(s, draw_minibatch(s, 6, seed=seed), 6)
        checked += 1
    assert checked > 0


def test_fxss_round_trip(tmp_path, samples):
    save_samples(samples, tmp_path / "s.fxss")
    back = load_samples(tmp_path / "s.fxss")
    np.testing.assert_array_equal(back.points, samples.points)
    np.testing.assert_array_equal(back.labels, samples.labels)
    np.testing.assert_array_equal(back.source, samples.source)
    data = samples_to_bytes(samples)
    assert len(data) == 16 + 14 * len(samples)


def test_fxss_label_bits():
    s = SampleSet(np.zeros((2, 3)), np.array([[1, 1, 1], [0, 1, 0]], np.uint8), np.array([1, 2], np.uint8))
    data = samples_to_bytes(s)
    assert data[16 + 12] == 0b111 and data[16 + 14 + 12] == 0b010
    assert data[16 + 13] == 1


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXSS" + d[4:],
    lambda d: d[:4] + (9).to_bytes(4, "little") + d[8:],
    lambda d: d[:-1],
    lambda d: d[:8],
])
def test_fxss_corruption(samples, mutate):
    with pytest.raises(SampleFormatError):
        samples_from_bytes(mutate(samples_to_bytes(samples)))
