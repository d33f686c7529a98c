import json
import math

import numpy as np
import pytest

from silocate.datagen import (
    ClientDataset,
    CsvSchemaError,
    SynthConfig,
    WeightBank,
    WeightDist,
    assign_treatments,
    build_feature_schema,
    eval_structural,
    export_synthetic,
    generate_potential_outcomes,
    generate_weights,
    load_tabular_csv,
    make_synthetic,
    train_test_split,
)


def small_cfg(**kw):
    base = dict(n_clients=2, d_shared=3, d_private=(2, 4), n_samples=(50, 60), seed=7)
    base.update(kw)
    return SynthConfig(**base)


class TestSchema:
    def test_client_dims(self):
        s = build_feature_schema(None, 2, 3, [2, 4])
        assert [s.client_dims(k) for k in range(2)] == [5, 7]
        assert s.shared_dims == 3
        assert s.private_dims == (2, 4)

    def test_deterministic_partition(self):
        a = build_feature_schema(39, 3, 5, [4, 6, 8], seed=11)
        b = build_feature_schema(39, 3, 5, [4, 6, 8], seed=11)
        assert a == b
        cols = list(a.shared_columns) + [c for p in a.private_columns for c in p]
        assert len(set(cols)) == len(cols) == 23
        assert all(0 <= c < 39 for c in cols)

    def test_rejects_zero_shared(self):
        with pytest.raises(ValueError):
            build_feature_schema(None, 2, 0, [2, 2])

    def test_insufficient_columns(self):
        with pytest.raises(ValueError, match="insufficient"):
            build_feature_schema(10, 2, 5, [3, 3])


class TestWeights:
    def test_same_seed_identical(self):
        cfg = small_cfg()
        schema = build_feature_schema(None, 2, 3, [2, 4])
        a0, at = generate_weights(schema, cfg)
        b0, bt = generate_weights(schema, cfg)
        for x, y in ((a0, b0), (at, bt)):
            assert x.shared.tobytes() == y.shared.tobytes()
            for u, v in zip(x.private + x.full, y.private + y.full):
                assert u.tobytes() == v.tobytes()

    def test_banks_independent(self):
        schema = build_feature_schema(None, 2, 3, [2, 4])
        b0, bt = generate_weights(schema, small_cfg())
        assert not np.array_equal(b0.shared, bt.shared)

    def test_zero_scale_degenerate(self):
        schema = build_feature_schema(None, 2, 3, [2, 4])
        b0, _ = generate_weights(schema, small_cfg(weight_scale=0.0))
        assert np.all(b0.shared == -10.0)
        assert all(np.all(p == -10.0) for p in b0.private + b0.full)

    def test_empirical_mean_normal(self):
        # 10^5 draws with variance 10: standard error sqrt(10 / 1e5)
        schema = build_feature_schema(None, 1, 100_000, [0])
        b0, _ = generate_weights(schema, SynthConfig(n_clients=1, d_shared=100_000, d_private=(0,), n_samples=(1,)))
        se = math.sqrt(10.0 / 100_000)
        assert abs(b0.shared.mean() - (-10.0)) < 3 * se
        assert b0.shared.var() == pytest.approx(10.0, rel=0.03)

    def test_uniform_reading(self):
        schema = build_feature_schema(None, 1, 10_000, [0])
        cfg = SynthConfig(n_clients=1, d_shared=10_000, d_private=(0,), n_samples=(1,), weight_dist=WeightDist.UNIFORM)
        b0, _ = generate_weights(schema, cfg)
        assert b0.shared.min() >= -10.0 and b0.shared.max() <= 10.0
        assert abs(b0.shared.mean()) < 3 * math.sqrt(100.0 / 3 / 10_000)


def hand_bank(shared, private, full):
    return WeightBank(np.atleast_2d(np.array(shared, float)), [np.array(p, float) for p in private], [np.array(f, float) for f in full])


class TestStructural:
    def test_private_only(self):
        # alpha=0, beta=1: (1*2 + 3*4) / 2 = 7
        cfg = SynthConfig(n_clients=1, alpha=0.0, beta=1.0, d_shared=1, d_private=(2,), n_samples=(1,))
        bank = hand_bank([[5.0]], [[1.0, 3.0]], [[9.0, 9.0, 9.0]])
        assert eval_structural([1.0], [2.0, 4.0], bank, 0, cfg) == pytest.approx(7.0)

    def test_full_only(self):
        # alpha=0, beta=0, d_k=2, w=(2,2), x=(1,1): 4/2 = 2
        cfg = SynthConfig(n_clients=1, alpha=0.0, beta=0.0, d_shared=1, d_private=(1,), n_samples=(1,))
        bank = hand_bank([[7.0]], [[7.0]], [[2.0, 2.0]])
        assert eval_structural([1.0], [1.0], bank, 0, cfg) == pytest.approx(2.0)

    def test_shared_sum_over_domains(self):
        # alpha=1, K=2, d_s=2: (1/2) * [(1*1 + 2*3) + (3*1 + 4*3)] / 2 = 5.5
        cfg = SynthConfig(n_clients=2, alpha=1.0, d_shared=2, d_private=(1, 1), n_samples=(1, 1))
        bank = hand_bank([[1.0, 2.0], [3.0, 4.0]], [[0.0], [0.0]], [[0.0] * 3, [0.0] * 3])
        assert eval_structural([1.0, 3.0], [0.0], bank, 0, cfg) == pytest.approx(5.5)

    def test_alpha_one_ignores_private(self):
        cfg = small_cfg(alpha=1.0)
        schema = build_feature_schema(None, 2, 3, [2, 4])
        bank, _ = generate_weights(schema, cfg)
        xs = np.array([0.3, -1.0, 2.0])
        a = eval_structural(xs, [1.0, 2.0, 3.0, 4.0], bank, 1, cfg)
        b = eval_structural(xs, [-9.0, 0.0, 5.0, 1.0], bank, 1, cfg)
        assert a == b
        # also independent of private/full weights
        bank2 = WeightBank(bank.shared, [p * 0 + 99 for p in bank.private], [f * 0 - 3 for f in bank.full])
        assert eval_structural(xs, [1.0, 2.0, 3.0, 4.0], bank2, 1, cfg) == a

    def test_shared_term_identical_across_clients(self):
        cfg = small_cfg(alpha=1.0)
        schema = build_feature_schema(None, 2, 3, [2, 4])
        bank, _ = generate_weights(schema, cfg)
        xs = np.array([1.0, 0.5, -0.25])
        assert eval_structural(xs, np.zeros(2), bank, 0, cfg) == eval_structural(xs, np.zeros(4), bank, 1, cfg)

    def test_dimension_mismatch(self):
        cfg = small_cfg()
        schema = build_feature_schema(None, 2, 3, [2, 4])
        bank, _ = generate_weights(schema, cfg)
        with pytest.raises(ValueError):
            eval_structural(np.zeros(3), np.zeros(3), bank, 0, cfg)

    def test_batch_matches_rows(self):
        cfg = small_cfg()
        schema = build_feature_schema(None, 2, 3, [2, 4])
        bank, _ = generate_weights(schema, cfg)
        rng = np.random.default_rng(0)
        xs, xp = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        batch = eval_structural(xs, xp, bank, 1, cfg)
        for i in range(5):
            assert batch[i] == pytest.approx(eval_structural(xs[i], xp[i], bank, 1, cfg), abs=1e-12)


class TestOutcomes:
    def test_all_zero(self):
        cfg = small_cfg(noise_var=0.0, weight_scale=0.0, weight_loc=0.0)
        schema = build_feature_schema(None, 2, 3, [2, 4])
        for ds in generate_potential_outcomes(schema, cfg):
            assert np.all(ds.true_y0 == 0.0) and np.all(ds.true_y1 == 0.0)

    def test_effect_equals_tau_bank(self):
        cfg = small_cfg()
        schema = build_feature_schema(None, 2, 3, [2, 4])
        _, bank_tau = generate_weights(schema, cfg)
        for ds in generate_potential_outcomes(schema, cfg):
            tau = eval_structural(ds.x_shared, ds.x_private, bank_tau, ds.client_id, cfg)
            np.testing.assert_allclose(ds.true_y1 - ds.true_y0, tau, atol=1e-10)

    def test_noise_variance(self):
        # residual variance over 1e5 samples; sd of the sample variance ~ 0.01 * sqrt(2 / 1e5)
        cfg = SynthConfig(n_clients=1, d_shared=2, d_private=(2,), n_samples=(100_000,), seed=3)
        schema = build_feature_schema(None, 1, 2, [2])
        bank0, _ = generate_weights(schema, cfg)
        (ds,) = generate_potential_outcomes(schema, cfg)
        resid = ds.true_y0 - eval_structural(ds.x_shared, ds.x_private, bank0, 0, cfg)
        assert resid.var() == pytest.approx(0.01, abs=5 * 0.01 * math.sqrt(2 / 100_000))

    def test_cate_finite_everywhere(self):
        _, data = make_synthetic(small_cfg())
        for ds in data:
            assert np.all(np.isfinite(ds.true_cate))


class TestTreatment:
    def _pos(self, tau, n=10_000):
        y0 = np.zeros(n)
        return [ClientDataset(0, np.zeros((n, 1)), np.zeros((n, 0)), true_y0=y0, true_y1=y0 + tau)]

    def test_zero_effect_is_fair_coin(self):
        (ds,) = assign_treatments(self._pos(0.0), seed=1)
        # p = 0.5; 10^4 draws, sd 0.005
        assert abs(ds.treatment.mean() - 0.5) < 4 * 0.005

    def test_saturated(self):
        (ds,) = assign_treatments(self._pos(50.0), seed=1)
        assert ds.treatment.mean() > 0.999

    def test_deterministic(self):
        a = assign_treatments(self._pos(0.3), seed=5)[0].treatment
        b = assign_treatments(self._pos(0.3), seed=5)[0].treatment
        assert a.tobytes() == b.tobytes()

    def test_consistency(self):
        _, data = make_synthetic(small_cfg())
        for ds in data:
            assert set(np.unique(ds.treatment)) <= {0.0, 1.0}
            expected = np.where(ds.treatment == 1.0, ds.true_y1, ds.true_y0)
            assert np.array_equal(ds.outcome, expected)

    def test_missing_pos(self):
        with pytest.raises(ValueError):
            assign_treatments([ClientDataset(0, np.zeros((2, 1)), np.zeros((2, 0)))], seed=0)

    def test_standardized_balances(self):
        big = self._pos(np.linspace(40.0, 60.0, 10_000))
        raw = assign_treatments(big, seed=2)[0].treatment.mean()
        std = assign_treatments(big, seed=2, standardize_tau=True)[0].treatment.mean()
        assert raw > 0.999
        assert 0.4 < std < 0.6


class TestSplit:
    def test_sizes_and_partition(self):
        _, (ds, _) = make_synthetic(small_cfg(n_samples=(10, 12)))
        tr, te = train_test_split(ds, 0.2, seed=3)
        assert (tr.n, te.n) == (8, 2)
        rows = {tuple(r) for r in ds.x_shared}
        got = [tuple(r) for r in np.vstack([tr.x_shared, te.x_shared])]
        assert set(got) == rows and len(got) == len(rows)

    def test_pos_follow_rows(self):
        _, (ds, _) = make_synthetic(small_cfg())
        tr, te = train_test_split(ds, 0.3, seed=3)
        for part in (tr, te):
            for i in range(part.n):
                j = np.flatnonzero((ds.x_shared == part.x_shared[i]).all(axis=1))[0]
                assert part.true_y0[i] == ds.true_y0[j] and part.outcome[i] == ds.outcome[j]

    def test_deterministic(self):
        _, (ds, _) = make_synthetic(small_cfg())
        a = train_test_split(ds, 0.2, 4)[1].x_shared
        b = train_test_split(ds, 0.2, 4)[1].x_shared
        assert a.tobytes() == b.tobytes()

    def test_errors(self):
        _, (ds, _) = make_synthetic(small_cfg())
        for f in (0.0, 1.0, -0.1):
            with pytest.raises(ValueError):
                train_test_split(ds, f, 0)
        tiny = ds.subset(np.arange(1))
        with pytest.raises(ValueError):
            train_test_split(tiny, 0.5, 0)


class TestReproducibility:
    def test_bit_identical(self):
        _, a = make_synthetic(small_cfg())
        _, b = make_synthetic(small_cfg())
        for x, y in zip(a, b):
            for f in ("x_shared", "x_private", "treatment", "outcome", "true_y0", "true_y1"):
                assert getattr(x, f).tobytes() == getattr(y, f).tobytes()

    def test_client_stream_independent_of_other_clients(self):
        # client 0's data must not depend on how many clients follow it
        _, two = make_synthetic(small_cfg())
        _, three = make_synthetic(small_cfg(n_clients=3, d_private=(2, 4, 1), n_samples=(50, 60, 5)))
        assert two[0].x_shared.tobytes() == three[0].x_shared.tobytes()


GOLDEN = "a,b,c,treat,out\n1.5,2,3,1,10.25\n-4,5e-1,6,0,-1\n7,8,9.75,1,0\n"


class TestCsv:
    def test_golden(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text(GOLDEN)
        ds = load_tabular_csv(p, ["c", "a"], ["b"], "treat", "out")
        np.testing.assert_array_equal(ds.x_shared, [[3, 1.5], [6, -4], [9.75, 7]])
        np.testing.assert_array_equal(ds.x_private, [[2], [0.5], [8]])
        np.testing.assert_array_equal(ds.treatment, [1, 0, 1])
        np.testing.assert_array_equal(ds.outcome, [10.25, -1, 0])
        assert not ds.has_truth

    def test_bad_treatment(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text(GOLDEN.replace("\n-4,5e-1,6,0,", "\n-4,5e-1,6,2,"))
        with pytest.raises(CsvSchemaError, match="0/1"):
            load_tabular_csv(p, ["a"], ["b"], "treat", "out")

    def test_missing_header_column(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("1,2,3\n4,5,6\n")
        with pytest.raises(CsvSchemaError, match="missing column"):
            load_tabular_csv(p, ["a"], ["b"], "treat", "out")

    def test_non_numeric_reports_position(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text(GOLDEN.replace("7,8,", "7,x,"))
        with pytest.raises(CsvSchemaError, match=r"row 4, column 'b'"):
            load_tabular_csv(p, ["a"], ["b"], "treat", "out")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tabular_csv(tmp_path / "nope.csv", ["a"], [], "t", "y")

    def test_export_roundtrip(self, tmp_path):
        cfg = small_cfg()
        schema, data = make_synthetic(cfg)
        paths = export_synthetic(data, cfg, schema, tmp_path)
        assert [p.name for p in paths] == ["client_0.csv", "client_1.csv", "dataset.json"]
        side = json.loads((tmp_path / "dataset.json").read_text())
        assert side["config"]["d_private"] == [2, 4]
        back = load_tabular_csv(
            tmp_path / "client_1.csv",
            [f"x_s_{i}" for i in range(3)],
            [f"x_p_{i}" for i in range(4)],
            "w",
            "y",
            y0_column="y0",
            y1_column="y1",
        )
        assert back.x_private.tobytes() == data[1].x_private.tobytes()
        assert back.true_y1.tobytes() == data[1].true_y1.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(alpha=1.5)
    with pytest.raises(ValueError):
        small_cfg(noise_var=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(n_clients=0, d_private=(), n_samples=())
