import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellguard import (
    CellguardError,
    DataMatrix,
    FilterConfig,
    adaptive_cutoff,
    apply_filter,
    flag_proportion,
)


def brute_flag_proportion(z, alpha=0.95):
    """Literal evaluation of the tail-shortfall maximum, kept independent."""
    from scipy.stats import norm

    a = np.sort(np.abs(np.asarray(z, dtype=float)))
    m = a.size
    eta = norm.ppf((1 + alpha) / 2)
    best = 0.0
    for i in range(1, m + 1):  # 1-based order statistics
        if a[i - 1] < eta:
            continue
        best = max(best, (2 * norm.cdf(a[i - 1]) - 1) - (i - 1) / m)
    return max(best, 0.0)


class TestFlagProportion:
    def test_single_far_outlier(self):
        z = [0.1, -0.15, 0.2, -0.3, 10.0]
        # only |Z|=10 exceeds eta; shortfall is F+(10) - 4/5 = 0.2
        assert flag_proportion(z) == pytest.approx(0.2, abs=1e-12)

    def test_all_below_eta(self):
        assert flag_proportion([0.0, 0.1, -0.1]) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            z = rng.standard_normal(rng.integers(3, 60)) * rng.uniform(0.5, 4.0)
            assert flag_proportion(z) == pytest.approx(brute_flag_proportion(z), abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(CellguardError):
            flag_proportion([0.0, np.nan, 1.0])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        z = rng.standard_normal(40) * 2
        assert flag_proportion(z) == flag_proportion(z[rng.permutation(40)])

    def test_clean_normal_rarely_flags(self):
        # Simulation oracle: at n=1000 the tail shortfall stays below 0.02
        # in at least 95% of draws (and is usually far smaller).
        rng = np.random.default_rng(20240817)
        ds = np.array([flag_proportion(rng.standard_normal(1000)) for _ in range(200)])
        assert np.mean(ds <= 0.02) >= 0.95
        assert ds.mean() < 0.01


class TestAdaptiveCutoff:
    def test_single_outlier_cutoff_is_largest_unflagged(self):
        z = np.array([0.1, -0.15, 0.2, -0.3, 10.0])
        d = flag_proportion(z)
        t, flagged = adaptive_cutoff(z, d)
        assert flagged.tolist() == [4]
        assert t == pytest.approx(0.3)

    def test_no_flags_means_infinite_cutoff(self):
        t, flagged = adaptive_cutoff(np.array([0.0, 0.1, -0.1]), 0.0)
        assert math.isinf(t)
        assert flagged.size == 0

    def test_tie_break_prefers_later_index(self):
        z = np.array([1.0, 2.0, 2.0, 2.0, 9.0])
        t, flagged = adaptive_cutoff(z, 0.2)  # floor(5 * 0.2) = 1
        assert flagged.tolist() == [4]
        z2 = np.array([1.0, 2.0, 2.0, 2.0, 2.0])
        t2, flagged2 = adaptive_cutoff(z2, 0.4)  # two flags among the tied 2s
        assert flagged2.tolist() == [3, 4]
        assert t2 == pytest.approx(2.0)

    @given(
        st.lists(
            st.floats(min_value=-50, max_value=50, allow_nan=False),
            min_size=1,
            max_size=50,
        ),
        st.floats(min_value=0.0, max_value=0.99),
    )
    @settings(max_examples=120, deadline=None)
    def test_count_law(self, z, d):
        z = np.asarray(z)
        m = z.size
        expected = int(math.floor(m * d + 1e-9))
        t, flagged = adaptive_cutoff(z, d)
        assert flagged.size == expected
        if expected:
            # flagged cells carry the largest absolute values
            absz = np.abs(z)
            kept = np.setdiff1d(np.arange(m), flagged)
            if kept.size:
                assert absz[flagged].min() >= absz[kept].max() - 1e-12


class TestApplyFilter:
    def test_clean_data_untouched_when_all_below_eta(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(-1.0, 1.0, size=(30, 3))
        X = DataMatrix(vals)
        filtered, res = apply_filter(X)
        assert res.q_n == 1.0
        assert filtered == X
        assert all(math.isinf(t) for t in res.cutoff)

    def test_clean_normal_flag_fraction(self):
        # Simulation oracle: median flagged fraction about 1.9%; under 3.5%
        # in at least 90% of draws at n=100, p=10.
        rng = np.random.default_rng(77)
        fracs = []
        for _ in range(60):
            X = DataMatrix(rng.standard_normal((100, 10)))
            _, res = apply_filter(X)
            fracs.append(len(res.flagged) / 1000)
        assert np.mean(np.asarray(fracs) <= 0.035) >= 0.9

    def test_icm_contamination_mostly_flagged(self):
        rng = np.random.default_rng(9)
        caught = total = 0
        for _ in range(10):
            vals = rng.standard_normal((100, 10))
            flat = rng.choice(1000, 100, replace=False)
            vals.flat[flat] = 100.0
            _, res = apply_filter(DataMatrix(vals))
            bad = {divmod(int(f), 10) for f in flat}
            caught += sum(1 for cell in res.flagged if cell in bad)
            total += len(bad)
        assert caught / total >= 0.99

    def test_flag_count_matches_d(self):
        rng = np.random.default_rng(4)
        vals = rng.standard_normal((80, 4))
        vals[:8, 2] = 25.0
        X = DataMatrix(vals)
        _, res = apply_filter(X)
        for j in range(4):
            m = int(X.mask[:, j].sum())
            newly = sum(1 for _, c in res.flagged if c == j)
            assert newly == int(math.floor(m * res.d[j] + 1e-9))

    def test_existing_missing_cells_stay_missing(self):
        rng = np.random.default_rng(6)
        vals = rng.standard_normal((50, 3))
        vals[0, 0] = np.nan
        filtered, res = apply_filter(DataMatrix(vals))
        assert not res.mask_out[0, 0]

    def test_coordinatewise_affine_invariance_of_flags(self):
        rng = np.random.default_rng(13)
        vals = rng.standard_normal((60, 4))
        vals[3, 1] = 30.0
        vals[17, 2] = -12.0
        _, res_a = apply_filter(DataMatrix(vals))
        transformed = vals * np.array([2.0, 0.5, 8.0, 1.25]) + np.array([5.0, -3.0, 0.0, 100.0])
        _, res_b = apply_filter(DataMatrix(transformed))
        assert res_a.flagged == res_b.flagged

    def test_row_emptied_by_filter_is_dropped(self):
        rng = np.random.default_rng(15)
        vals = rng.standard_normal((40, 2)) * 0.5
        vals[7] = [90.0, -90.0]  # both cells outlying -> row vanishes
        with pytest.warns(UserWarning, match="dropping"):
            filtered, res = apply_filter(DataMatrix(vals))
        assert res.dropped_rows == (7,)
        assert filtered.n == 39
        assert res.q_n == pytest.approx(np.mean(res.mask_out.all(axis=1)))

    def test_json_round_trip_schema(self):
        rng = np.random.default_rng(8)
        vals = rng.standard_normal((50, 3))
        vals[11, 0] = 44.0
        _, res = apply_filter(DataMatrix(vals))
        doc = json.loads(res.to_json())
        assert set(doc) == {"d", "cutoff", "flagged", "q_n"}
        assert [11, 0] in doc["flagged"]
        assert doc["cutoff"][1] is None or isinstance(doc["cutoff"][1], float)

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            FilterConfig(alpha=1.0)
        with pytest.raises(ValueError):
            FilterConfig(reference="cauchy")


def test_monotone_consistency_desk_scale():
    # Larger samples flag a smaller fraction on clean data.
    rng = np.random.default_rng(314)
    frac = {}
    for n in (100, 2000):
        total = 0.0
        for _ in range(60):
            d = flag_proportion(rng.standard_normal(n))
            total += math.floor(n * d + 1e-9) / n
        frac[n] = total / 60
    assert frac[2000] < frac[100]
