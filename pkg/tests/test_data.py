import numpy as np
import pytest

from fusionkan.data import (
    Normalizer,
    ShotRecord,
    decode_features,
    encode,
    encode_many,
    fit_normalizer,
    load_dataset,
    physical_matrix,
    save_dataset,
    synthesize,
)
from fusionkan.errors import ArgumentError, DataError
from fusionkan.physics import expert_yield
from fusionkan.schema import CSV_HEADER, FEATURES

HEADER = ",".join(CSV_HEADER)

# canary: a fixed record whose encoding is pinned so feature order cannot drift
CANARY = ShotRecord("canary", 25.0, 450.0, 0.65, 0.91, 0.95, 1.65, 18.5, 1.0, 1.0, 1.25, 0.75, "C2", 1e13)


def write(tmp_path, text):
    p = tmp_path / "d.csv"
    p.write_text(text, encoding="utf-8")
    return p


class TestLoad:
    def test_header_only(self, tmp_path):
        assert load_dataset(write(tmp_path, HEADER + "\n")) == []

    def test_yoc_out_of_bounds(self, tmp_path):
        row = "a,25,450,0.6,0.9,0.9,1.0,18,1,1,1.2,1.5,C0,1e13"
        with pytest.raises(DataError, match="yoc_he") as err:
            load_dataset(write(tmp_path, HEADER + "\n" + row + "\n"))
        assert err.value.row == 2 and err.value.column == "yoc_he"

    def test_unparseable(self, tmp_path):
        row = "a,25,abc,0.6,0.9,0.9,1.0,18,1,1,1.2,0.5,C0,1e13"
        with pytest.raises(DataError) as err:
            load_dataset(write(tmp_path, HEADER + "\n" + row + "\n"))
        assert err.value.column == "r_out_um"

    def test_missing_column(self, tmp_path):
        with pytest.raises(DataError, match="y_exp"):
            load_dataset(write(tmp_path, HEADER.replace(",y_exp", "") + "\n"))

    def test_unknown_composition(self, tmp_path):
        row = "a,25,450,0.6,0.9,0.9,1.0,18,1,1,1.2,0.5,C9,1e13"
        with pytest.raises(DataError, match="C9"):
            load_dataset(write(tmp_path, HEADER + "\n" + row + "\n"))

    def test_round_trip(self, tmp_path):
        recs = synthesize(50, seed=3, noise_sigma=0.1)
        path = tmp_path / "r.csv"
        save_dataset(recs, path)
        back = load_dataset(path)
        assert [r.shot_id for r in back] == [r.shot_id for r in recs]
        np.testing.assert_allclose(physical_matrix(back), physical_matrix(recs), rtol=1e-9)
        np.testing.assert_allclose([r.y_exp for r in back], [r.y_exp for r in recs], rtol=1e-9)


class TestNormalizer:
    def test_min_max(self):
        recs = synthesize(10, seed=1)
        norm = fit_normalizer(recs)
        X = norm.scale_features(physical_matrix(recs))
        np.testing.assert_allclose(X.min(axis=0), 0.0, atol=1e-15)
        np.testing.assert_allclose(X.max(axis=0), 1.0, atol=1e-15)

    def test_two_values(self):
        norm = Normalizer((1.0,) * 11, (3.0,) * 11, 0.0, 1.0)
        np.testing.assert_allclose(norm.scale_features(np.array([[1.0] * 11, [3.0] * 11]))[:, 0], [0.0, 1.0])

    def test_invert(self):
        recs = synthesize(40, seed=2, noise_sigma=0.3)
        norm = fit_normalizer(recs)
        X, y = encode_many(recs, norm)
        phys, comp = decode_features(X, norm)
        np.testing.assert_allclose(phys, physical_matrix(recs), rtol=1e-10)
        np.testing.assert_allclose(norm.unscale_target(y), [r.y_exp for r in recs], rtol=1e-10)

    def test_standardised_target(self):
        recs = synthesize(200, seed=4)
        _, y = encode_many(recs, fit_normalizer(recs))
        assert abs(y.mean()) < 1e-12
        assert y.std() == pytest.approx(1.0, abs=1e-12)

    def test_constant_feature_named(self):
        recs = [CANARY.replace(shot_id=str(i), e_l=20.0 + i) for i in range(3)]
        with pytest.raises(ArgumentError, match="r_out"):
            fit_normalizer(recs)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            fit_normalizer([])


class TestEncode:
    @pytest.fixture
    def norm(self):
        return fit_normalizer(synthesize(100, seed=5))

    def test_one_hot(self, norm):
        x, _ = encode(CANARY, norm)
        np.testing.assert_array_equal(x[11:], [0, 0, 1, 0, 0])

    def test_minima_encode_to_zero(self, norm):
        lows = CANARY.replace(**dict(zip(FEATURES, norm.feature_min)))
        x, _ = encode(lows, norm)
        np.testing.assert_array_equal(x[:11], np.zeros(11))

    def test_width(self, norm):
        x, _ = encode(CANARY, norm)
        assert x.shape == (16,)

    def test_unknown_category(self, norm):
        with pytest.raises(ArgumentError, match="C0, C1, C2, C3, C4"):
            encode(CANARY.replace(composition="C7"), norm)

    def test_canary_order(self):
        norm = Normalizer(
            (20.0, 400.0, 0.4, 0.85, 0.7, 0.3, 12.0, 0.8, 0.5, 1.0, 0.5),
            (30.0, 500.0, 0.9, 0.97, 1.2, 3.0, 25.0, 1.2, 1.5, 1.5, 1.0),
            0.0,
            1.0,
        )
        x, _ = encode(CANARY, norm)
        np.testing.assert_allclose(
            x, [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0, 0, 1, 0, 0], atol=1e-12
        )


class TestSynthesize:
    def test_noiseless_matches_expert(self):
        for r in synthesize(100, seed=6, noise_sigma=0.0, campaign_count=4):
            assert r.y_exp == pytest.approx(expert_yield(r), rel=1e-14)

    def test_empty(self):
        assert synthesize(0, seed=1) == []

    def test_noise_statistics(self):
        recs = synthesize(10_000, seed=7, noise_sigma=0.1)
        log_ratio = np.log([r.y_exp / expert_yield(r) for r in recs])
        assert abs(log_ratio.std(ddof=1) - 0.1) <= 0.005

    def test_reproducible(self):
        assert synthesize(30, seed=8, noise_sigma=0.2) == synthesize(30, seed=8, noise_sigma=0.2)

    def test_records_valid(self):
        for i, r in enumerate(synthesize(500, seed=9, noise_sigma=0.5, campaign_count=7, campaign_spread=0.5)):
            r.validate(row=i)

    @pytest.mark.parametrize("kw", [dict(n=-1), dict(noise_sigma=-0.1), dict(campaign_count=0)])
    def test_invalid(self, kw):
        args = dict(n=5, seed=0, noise_sigma=0.0, campaign_count=1)
        args.update(kw)
        with pytest.raises(ArgumentError):
            synthesize(**args)
