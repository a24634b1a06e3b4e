import numpy as np
import pytest

from eofusion.errors import DegenerateInputError
from eofusion.gpp import (
    FLUX_EPOCH, DailySeries, FluxSeries, GPPModelConfig, build_sequences,
    expected_qc_dropout, footprint_average, generate_flux_fixture,
    interpolate_embeddings, load_flux_csv, nrmse, quality_filter, rmse,
    save_flux_csv, seasonal_gpp_curve, train_gpp,
)


def flux(dates, gpp, qc, veg="DBF", site="SYN-T00"):
    return FluxSeries(site_id=site, dates=np.array(dates, dtype="datetime64[D]"),
                      gpp=np.asarray(gpp, dtype=float),
                      qc_fraction=np.asarray(qc, dtype=float), vegetation_type=veg)


class TestQualityFilter:
    def test_all_good_unchanged(self):
        f = flux(["2018-01-01", "2018-01-02"], [1.0, 2.0], [1.0, 1.0])
        out = quality_filter(f)
        assert np.array_equal(out.gpp, f.gpp)

    def test_negative_gpp_dropped(self):
        f = flux(["2018-01-01", "2018-01-02", "2018-01-03"], [1.0, -0.1, 2.0],
                 [1.0, 1.0, 1.0])
        out = quality_filter(f)
        assert out.gpp.tolist() == [1.0, 2.0]

    def test_threshold_boundary_inclusive(self):
        f = flux(["2018-01-01", "2018-01-02", "2018-01-03"], [1.0, 1.0, 1.0],
                 [0.69, 0.70, 0.71])
        out = quality_filter(f, 0.7)
        assert len(out.gpp) == 2
        assert str(out.dates[0]) == "2018-01-02"

    def test_bad_threshold(self):
        f = flux(["2018-01-01"], [1.0], [1.0])
        with pytest.raises(ValueError):
            quality_filter(f, 0.0)


class TestInterpolation:
    def test_midpoint(self):
        e = np.array([[0.2] * 7, [0.8] * 7])
        daily = interpolate_embeddings(e, np.array([0.0, 10.0]))
        assert daily.values[5, 0] == pytest.approx(0.5)
        assert len(daily.days) == 11

    def test_gap_free_input_reproduced(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(8, 7))
        times = np.arange(8, dtype=float) * 1.0
        daily = interpolate_embeddings(e, times)
        assert np.allclose(daily.values, e)

    def test_collinear_middle_exact(self):
        e = np.stack([np.array([0.1, 0.4, 0.7])] * 7, axis=1)
        daily = interpolate_embeddings(e, np.array([0.0, 5.0, 10.0]))
        assert daily.values[5, 0] == pytest.approx(0.4, abs=1e-12)

    def test_endpoints_clamped(self):
        e = np.array([[0.0] * 7, [1.0] * 7])
        daily = interpolate_embeddings(e, np.array([2.5, 4.5]))
        assert daily.days[0] == 3 and daily.days[-1] == 4

    def test_nan_frames_skipped(self):
        e = np.array([[0.2] * 7, [np.nan] * 7, [0.8] * 7])
        daily = interpolate_embeddings(e, np.array([0.0, 4.0, 10.0]))
        assert daily.values[5, 0] == pytest.approx(0.5)

    def test_too_few_valid_rejected(self):
        e = np.array([[0.2] * 7, [np.nan] * 7])
        with pytest.raises(ValueError):
            interpolate_embeddings(e, np.array([0.0, 5.0]))

    def test_convex_hull_bound(self):
        rng = np.random.default_rng(1)
        e = rng.uniform(0, 1, size=(12, 7))
        times = np.sort(rng.choice(200, size=12, replace=False)).astype(float)
        daily = interpolate_embeddings(e, times)
        assert daily.values.min() >= e.min() - 1e-12
        assert daily.values.max() <= e.max() + 1e-12


class TestBuildSequences:
    def make_daily(self, n, start_day=0):
        rng = np.random.default_rng(2)
        return DailySeries(days=np.arange(start_day, start_day + n),
                           values=rng.normal(size=(n, 7)))

    def full_flux(self, days):
        dates = FLUX_EPOCH + np.asarray(days)
        return flux(dates, np.ones(len(days)), np.ones(len(days)))

    def test_hundred_days_two_windows(self):
        daily = self.make_daily(100)
        samples = build_sequences(daily, self.full_flux(daily.days), 90, 10)
        assert len(samples) == 2
        assert [s.end_day for s in samples] == [89, 99]

    def test_exactly_one_window(self):
        daily = self.make_daily(90)
        samples = build_sequences(daily, self.full_flux(daily.days), 90, 10)
        assert len(samples) == 1
        assert samples[0].features.shape == (90, 7)

    def test_short_coverage_empty(self):
        daily = self.make_daily(89)
        assert build_sequences(daily, self.full_flux(daily.days), 90, 10) == []

    def test_filtered_target_skips_window(self):
        daily = self.make_daily(100)
        keep = [d for d in daily.days if d != 89]
        samples = build_sequences(daily, self.full_flux(keep), 90, 10)
        assert [s.end_day for s in samples] == [99]

    def test_window_bounds_enforced(self):
        daily = self.make_daily(200)
        f = self.full_flux(daily.days)
        with pytest.raises(ValueError):
            build_sequences(daily, f, window=30)
        with pytest.raises(ValueError):
            build_sequences(daily, f, window=121)
        assert build_sequences(daily, f, window=60)
        assert build_sequences(daily, f, window=120)

    def test_brute_force_enumeration(self):
        daily = self.make_daily(137, start_day=50)
        f = self.full_flux(daily.days)
        samples = build_sequences(daily, f, 90, 10)
        expected_ends = [int(daily.days[e]) for e in range(89, 137, 10)]
        assert [s.end_day for s in samples] == expected_ends


class TestNRMSE:
    def test_perfect(self):
        t = np.array([0.0, 5.0, 10.0])
        assert nrmse(t, t) == 0.0

    def test_uniform_error_over_range(self):
        target = np.array([0.0, 2.0, 5.0, 10.0])
        pred = target + 1.0
        assert nrmse(pred, target) == pytest.approx(0.1, rel=1e-12)

    def test_joint_scaling_invariance(self):
        rng = np.random.default_rng(3)
        target = rng.uniform(0, 10, 50)
        pred = target + rng.normal(size=50)
        assert nrmse(3.0 * pred, 3.0 * target) == pytest.approx(nrmse(pred, target), rel=1e-12)

    def test_identity_with_rmse(self):
        rng = np.random.default_rng(4)
        target = rng.uniform(0, 10, 50)
        pred = target + rng.normal(size=50)
        span = target.max() - target.min()
        assert nrmse(pred, target) * span == pytest.approx(rmse(pred, target), rel=1e-12)

    def test_zero_range_degenerate(self):
        with pytest.raises(DegenerateInputError):
            nrmse(np.array([1.0, 2.0]), np.array([5.0, 5.0]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse(np.array([1.0]), np.array([1.0, 2.0]))


class TestFixture:
    def test_deterministic(self):
        a = generate_flux_fixture(seed=5, sites=3)
        b = generate_flux_fixture(seed=5, sites=3)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.flux.gpp, fb.flux.gpp)
            assert np.array_equal(fa.embeddings.e, fb.embeddings.e, equal_nan=True)
        c = generate_flux_fixture(seed=6, sites=3)
        assert not np.array_equal(a[0].flux.gpp, c[0].flux.gpp)

    def test_qc_dropout_fraction(self):
        fixtures = generate_flux_fixture(seed=1, sites=9)
        qc = np.concatenate([f.flux.qc_fraction for f in fixtures])
        doy = np.concatenate([
            (f.flux.dates - f.flux.dates.astype("datetime64[Y]")).astype(int)
            for f in fixtures
        ])
        assert len(qc) >= 10_000
        observed = (qc < 0.7).mean()
        assert abs(observed - expected_qc_dropout(doy)) <= 0.01

    def test_grassland_has_two_peaks(self):
        doy = np.arange(365)
        curve = seasonal_gpp_curve("GRA", doy)
        interior = (curve[1:-1] > curve[:-2]) & (curve[1:-1] > curve[2:])
        prominent = interior & (curve[1:-1] > curve.mean())
        assert prominent.sum() == 2
        assert seasonal_gpp_curve("DBF", doy).argmax() == 180

    def test_vegetation_types_cycle(self):
        fixtures = generate_flux_fixture(seed=2, sites=5)
        assert [f.flux.vegetation_type for f in fixtures] == \
               ["DBF", "ENF", "GRA", "DBF", "ENF"]

    def test_embedding_stub_shape(self):
        fixture = generate_flux_fixture(seed=3, sites=1)[0]
        assert fixture.embeddings.e.shape[1:] == (3, 3, 7)
        assert fixture.embeddings.kind == "fused"


class TestFootprint:
    def test_average_over_square(self):
        fixture = generate_flux_fixture(seed=4, sites=1)[0]
        times, values = footprint_average(fixture.embeddings, (1, 1), half_size=1)
        assert values.shape == (len(times), 7)
        valid = np.isfinite(values).all(axis=1)
        e = fixture.embeddings.e
        idx = int(np.flatnonzero(valid)[0])
        assert values[idx] == pytest.approx(e[idx].reshape(-1, 7).mean(axis=0), rel=1e-5)


class TestCSV:
    def test_round_trip(self, tmp_path):
        fixture = generate_flux_fixture(seed=7, sites=1)[0]
        path = tmp_path / "site.csv"
        save_flux_csv(fixture.flux, path)
        loaded = load_flux_csv(path, fixture.flux.site_id, fixture.flux.vegetation_type)
        assert np.array_equal(loaded.dates, fixture.flux.dates)
        assert np.array_equal(loaded.gpp, fixture.flux.gpp)
        assert np.array_equal(loaded.qc_fraction, fixture.flux.qc_fraction)


def pipeline_samples(fixtures, window=90, stride=10):
    samples = []
    for fx in fixtures:
        filtered = quality_filter(fx.flux)
        times, values = footprint_average(fx.embeddings, (1, 1))
        daily = interpolate_embeddings(values, times)
        samples.extend(build_sequences(daily, filtered, window, stride))
    return samples


@pytest.fixture(scope="module")
def samples():
    return pipeline_samples(generate_flux_fixture(seed=11, sites=3))


class TestTrainGPP:
    def test_year_split_correctness(self, samples):
        ckpt, metrics = train_gpp(samples, epochs=2, seed=0)
        years = {s.year for s in samples}
        assert years == {2017, 2018, 2019, 2020}
        train = [s for s in samples if s.year in (2017, 2018, 2019)]
        val = [s for s in samples if s.year == 2020]
        assert metrics["train"]["n"] == len(train)
        assert metrics["val"]["n"] == len(val)
        assert metrics["global"]["n"] == len(samples)

    def test_baseline_reported(self, samples):
        _, metrics = train_gpp(samples, epochs=1, seed=0)
        assert "baseline" in metrics
        assert metrics["baseline"]["val"]["nrmse"] > 0

    def test_empty_split_rejected(self, samples):
        val_only = [s for s in samples if s.year == 2020]
        with pytest.raises(ValueError):
            train_gpp(val_only, epochs=1)

    def test_model_config_validation(self):
        with pytest.raises(Exception):
            GPPModelConfig(model_dim=30, heads=4)

    def test_regressor_output_shape(self, samples):
        import torch
        from eofusion.gpp import GPPRegressor
        model = GPPRegressor(GPPModelConfig(model_dim=16, heads=4, encoder_blocks=2))
        x = torch.zeros(5, 90, 7)
        assert model(x).shape == (5,)
