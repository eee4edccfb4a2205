from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muloco import scaling_fit as sf
from muloco.scaling_fit import FitDatum, InversionError, RankDeficiencyError

C = np.geomspace(1e17, 1e22, 8)


def _data(method, a, alpha, irr, xs=C):
    return [FitDatum(method, float(x), a * float(x) ** alpha + irr) for x in xs]


class TestHuber:
    def test_branches(self):
        d = sf.HUBER_DELTA
        assert sf.huber(d / 2) == pytest.approx(0.125 * d * d)
        assert sf.huber(-3 * d) == pytest.approx(d * 2.5 * d)

    @given(st.floats(-1, 1))
    def test_continuous_and_bounded_by_square(self, r):
        assert 0.0 <= sf.huber(r) <= 0.5 * r * r + 1e-18


class TestPowerLaw:
    def test_generator_recovery(self):
        fit = sf.fit_power_law(_data("g", 6584.0, -0.199, 1.711), restarts=32)
        a, alpha = fit.params["g"]
        assert a == pytest.approx(6584.0, rel=1e-6)
        assert alpha == pytest.approx(-0.199, rel=1e-6)
        assert fit.offsets["g"] == pytest.approx(1.711, rel=1e-6)
        assert fit.residual < 1e-9

    def test_three_points_are_interpolated(self):
        fit = sf.fit_power_law(_data("g", 50.0, -0.3, 0.5, xs=[1.0, 10.0, 100.0]), restarts=32)
        assert fit.residual < 1e-8

    def test_plain_form(self):
        fit = sf.fit_power_law(_data("g", 3.0, -0.5, 0.0, xs=[1.0, 4.0]), "plain", restarts=4)
        assert fit.params["g"] == pytest.approx((3.0, -0.5), rel=1e-9) and fit.offsets["g"] == 0.0
        assert np.allclose(fit.predict("g", [16.0]), [0.75], rtol=1e-9)

    def test_equal_x_is_rank_deficient(self):
        with pytest.raises(RankDeficiencyError):
            sf.fit_power_law([FitDatum("g", 5.0, 1.0 + i) for i in range(4)])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            sf.fit_power_law(_data("g", 1.0, -0.5, 0.0, xs=[1.0, 2.0]), "per_method_offset")

    def test_deterministic(self):
        data = _data("g", 100.0, -0.2, 1.0)
        assert sf.fit_power_law(data, restarts=8, seed=3) == sf.fit_power_law(data, restarts=8, seed=3)

    def test_datum_validation(self):
        with pytest.raises(ValueError):
            FitDatum("g", 0.0, 1.0)
        with pytest.raises(ValueError):
            FitDatum("g", 1.0, float("nan"))


class TestJointIrr:
    def test_single_method_collapses_to_free_offset(self):
        data = _data("g", 100.0, -0.2, 1.0)
        joint = sf.fit_joint_irr(data, restarts=8)
        free = sf.fit_power_law(data, "per_method_offset", restarts=8)
        assert joint.offsets == free.offsets

    def test_shared_offset_recovered(self):
        data = _data("a", 5677.0, -0.195, 1.711) + _data("b", 6927.0, -0.2, 1.711)
        fit = sf.fit_joint_irr(data, restarts=16, candidates=60)
        assert fit.shared_offset == pytest.approx(1.711, rel=1e-2)

    def test_incompatible_offsets_fit_worse(self):
        data = _data("a", 100.0, -0.2, 1.0) + _data("b", 100.0, -0.2, 2.0)
        joint = sf.fit_joint_irr(data, restarts=8, candidates=40)
        free = sf.fit_power_law(data, restarts=8)
        assert joint.residual > 10 * free.residual


class TestCriticalBatch:
    def test_tolerance_band(self):
        cb = sf.critical_batch([16, 32, 64, 128], [2.1, 2.0, 2.019, 2.03])
        assert (cb.b_opt, cb.b_crit, cb.boundary) == (32, 64, False)

    def test_unsorted_input(self):
        assert sf.critical_batch([8, 1, 4, 2], [1.95, 2.0, 1.905, 1.9]).b_crit == 4

    def test_validation(self):
        with pytest.raises(ValueError):
            sf.critical_batch([1, 1], [1.0, 2.0])
        with pytest.raises(ValueError):
            sf.critical_batch([1, 2], [1.0])

    def test_bcrit_power_law(self):
        pts = [(d, 0.5 * d ** 0.4) for d in np.geomspace(1e8, 1e11, 5)]
        a, alpha = sf.bcrit_power_law(pts, restarts=8)
        assert (a, alpha) == pytest.approx((0.5, 0.4), rel=1e-8)


@pytest.fixture(scope="module")
def fits():
    data = _data("base", 5677.0, -0.195, 1.711) + _data("m", 6927.0, -0.2, 1.711)
    return sf.fit_at_offset(data, 1.711, restarts=16)


class TestEfficiency:
    def test_tokens_for_compute(self):
        n = 1e9
        assert sf.tokens_for_compute(6 * n * 20 * n) == pytest.approx(20 * n, rel=1e-12)

    def test_self_ratio_is_one(self, fits):
        curve = sf.efficiency_curve({"base": (fits, "base"), "copy": (fits, "base")},
                                    {"base": (1.0, 0.5), "copy": (1.0, 0.5)}, "base", C)
        assert np.allclose(curve.ratio["copy"], 1.0, rtol=1e-12)
        assert np.all(np.diff(curve.time) > 0)

    def test_larger_critical_batch_wins(self, fits):
        curve = sf.efficiency_curve({"base": (fits, "base"), "wide": (fits, "base")},
                                    {"base": (1.0, 0.5), "wide": (2.0, 0.5)}, "base", C)
        assert np.all(curve.ratio["wide"] > 1.0)

    def test_non_invertible_time(self, fits):
        # Exponent 2 makes T = C / B_crit decrease with compute.
        with pytest.raises(InversionError):
            sf.efficiency_curve({"base": (fits, "base")}, {"base": (1.0, 2.0)}, "base", C)


def test_records_reading():
    path = resources.files("muloco") / "data" / "final_losses.csv"
    records = sf.read_records(path)
    assert records[0] == sf.RunRecord("DP Muon", 1, 1.5e8, 3e9, records[0].batch_tokens, 3.124)
    assert np.isnan(records[0].batch_tokens)
    assert records[0].compute == pytest.approx(6 * 1.5e8 * 3e9)
    data = sf.records_to_data(records)
    assert data[0].method == "DP Muon/K1" and data[0].x == records[0].compute
