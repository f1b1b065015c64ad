import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from latent_cascade.metrics import (
    MetricsError,
    aggregate_seed_metrics,
    descriptor_table,
    multi_seed_report,
    property_report,
    sample_quality,
    w1_distance,
)


@pytest.mark.parametrize("a, b, expected", [
    ([0.0], [1.0], 1.0),
    ([0.0, 1.0], [0.0, 1.0], 0.0),
    ([0.0, 0.0], [1.0], 1.0),
    ([0.0, 2.0], [1.0, 1.0], 1.0),
])
def test_w1_oracles(a, b, expected):
    assert w1_distance(a, b) == pytest.approx(expected)


def test_w1_is_symmetric_and_order_free():
    a = [3.0, 1.0, 2.0, 7.5]
    b = [0.5, 4.0, 2.0]
    assert w1_distance(a, b) == pytest.approx(w1_distance(b, a))
    assert w1_distance(a, b) == pytest.approx(w1_distance(sorted(a), b[::-1]))


def test_w1_matches_scipy_on_unequal_sizes():
    rng = np.random.default_rng(0)
    for n, m in [(7, 3), (50, 31), (12, 12)]:
        a, b = rng.normal(size=n), rng.normal(1.0, 2.0, size=m)
        assert w1_distance(a, b) == pytest.approx(wasserstein_distance(a, b), abs=1e-12)


def test_w1_shift_oracle():
    a = np.linspace(0.0, 1.0, 11)
    assert w1_distance(a, a + 2.5) == pytest.approx(2.5)


def test_w1_rejects_empty_or_non_finite():
    with pytest.raises(MetricsError):
        w1_distance([], [1.0])
    with pytest.raises(MetricsError):
        w1_distance([np.nan], [1.0])


def test_sample_quality_counts():
    report = sample_quality(["CCO", "C1CC", "CCO"], ["CCO"], k=3)
    assert report.valid == 2 and report.invalid == 1
    assert report.valid_fraction == pytest.approx(2 / 3)
    assert report.novelty == 0.0
    assert report.unique_at_k == pytest.approx(2 / 3)
    assert not report.k_clipped


def test_sample_quality_unique_and_novel():
    report = sample_quality(["CCO", "CCN", "c1ccccc1"], ["CCC"], k=3)
    assert report.valid_fraction == 1.0
    assert report.unique_at_k == 1.0
    assert report.novelty == 1.0


def test_sample_quality_clips_k():
    report = sample_quality(["C", "C"], [], k=10)
    assert report.k == 2
    assert report.k_requested == 10
    assert report.k_clipped
    assert report.unique_at_k == 0.5


def test_sample_quality_unsupported_counted_separately():
    report = sample_quality(["CC.O", "C"], [], k=2)
    assert report.unsupported == 1
    assert report.valid_fraction == 0.5


def test_sample_quality_no_valid_strings():
    report = sample_quality(["C1", "(("], ["C"], k=2)
    assert report.valid_fraction == 0.0
    assert report.novelty == 0.0


def test_sample_quality_rejects_bad_input():
    with pytest.raises(MetricsError):
        sample_quality([], ["C"])
    with pytest.raises(MetricsError):
        sample_quality(["C"], ["C"], k=0)


def test_descriptor_table_skips_invalid():
    table = descriptor_table(["c1ccccc1", "C1CC", "C"])
    assert table["heavy_atoms"] == [6.0, 1.0]
    assert table["aromatic_fraction"] == [1.0, 0.0]


def test_property_report_identical_sets():
    ref = ["CCO", "c1ccccc1", "CC(=O)O", "C1CC1"]
    report = property_report(ref, ref)
    assert all(v == 0.0 for v in report.distances.values())
    assert report.n_gen_valid == report.n_ref_valid == 4


def test_property_report_one_more_carbon():
    report = property_report(["CCCO"], ["CCO"])
    assert report.distances["MW"] == pytest.approx(14.027, abs=1e-3)
    assert report.distances["heavy_atoms"] == 1.0
    assert report.distances["rings"] == 0.0


def test_property_report_needs_valid_molecules():
    with pytest.raises(MetricsError):
        property_report(["C1"], ["CCO"])


def test_multi_seed_mean_and_population_std():
    report = multi_seed_report(lambda seed: {"x": float(seed)}, [3, 1])
    assert report.seeds == [1, 3]
    assert report.summary["x"] == (2.0, 1.0)


def test_multi_seed_constant_metric_has_zero_std():
    report = multi_seed_report(lambda seed: {"x": 0.25}, [0, 1, 2])
    assert report.summary["x"] == (0.25, 0.0)


def test_multi_seed_records_failures():
    def run(seed):
        if seed == 2:
            raise ValueError("diverged")
        return {"x": float(seed)}

    report = multi_seed_report(run, [0, 1, 2])
    assert report.failures == {2: "diverged"}
    assert report.seeds == [0, 1, 2]
    assert report.summary["x"] == pytest.approx((0.5, 0.5))
    assert report.to_dict()["failures"] == {"2": "diverged"}


def test_multi_seed_needs_seeds():
    with pytest.raises(MetricsError):
        multi_seed_report(lambda seed: {}, [])


def test_aggregate_handles_partial_metrics():
    report = aggregate_seed_metrics({0: {"a": 1.0, "b": 2.0}, 1: {"a": 3.0}})
    assert report.metric_names == ["a", "b"]
    assert report.summary["b"] == (2.0, 0.0)


def _quantile_grid_w1(a, b):
    a, b = np.sort(a), np.sort(b)
    n, m = len(a), len(b)
    grid = sorted({i / n for i in range(n + 1)} | {j / m for j in range(m + 1)})
    total = 0.0
    for lo, hi in zip(grid, grid[1:]):
        t = 0.5 * (lo + hi)
        qa = a[min(int(np.ceil(t * n)) - 1, n - 1)]
        qb = b[min(int(np.ceil(t * m)) - 1, m - 1)]
        total += (hi - lo) * abs(qa - qb)
    return total


def test_w1_matches_quantile_grid_and_metric_axioms():
    rng = np.random.default_rng(11)
    for _ in range(500):
        a = rng.integers(-5, 6, size=rng.integers(1, 51)).astype(float)
        b = rng.normal(size=rng.integers(1, 51))
        c = rng.uniform(-3, 3, size=rng.integers(1, 51))
        d_ab = w1_distance(a, b)
        assert d_ab == pytest.approx(_quantile_grid_w1(a, b), abs=1e-9)
        assert d_ab >= 0.0
        assert w1_distance(a, a) == 0.0
        assert d_ab == pytest.approx(w1_distance(b, a), abs=1e-12)
        assert d_ab <= w1_distance(a, c) + w1_distance(c, b) + 1e-9
