import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somtp.data import (SYNTH_KINDS, DataError, Dataset, ZNorm, class_weights, load_dataset, parse_sktime_ts,
                        parse_ucr_tsv, rule_classify, split_train_val, synth_dataset, write_sktime_ts,
                        write_ucr_tsv)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestUCR:
    def test_single_line(self, tmp_path):
        ds = parse_ucr_tsv(write(tmp_path, "a.tsv", "1\t0.5\t0.7\n"))
        assert ds.labels == ("1",) and ds.y.tolist() == [0]
        np.testing.assert_array_equal(ds.X[0], [[0.5, 0.7]])

    def test_signed_labels(self, tmp_path):
        ds = parse_ucr_tsv(write(tmp_path, "a.tsv", "1 0 1\n-1 2 3\n1 4 5\n"))
        assert ds.labels == ("-1", "1")
        assert ds.y.tolist() == [1, 0, 1]

    def test_numeric_labels_sorted_by_value(self, tmp_path):
        ds = parse_ucr_tsv(write(tmp_path, "a.tsv", "10 0\n2 0\n"))
        assert ds.labels == ("2", "10")

    def test_ragged_row_names_line(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            parse_ucr_tsv(write(tmp_path, "a.tsv", "1 0 1\n2 0 1 2\n"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataError):
            parse_ucr_tsv(write(tmp_path, "a.tsv", "1 0 abc\n"))

    def test_round_trip(self, tmp_path):
        ds = synth_dataset("spike", 12, 20, seed=4)
        write_ucr_tsv(ds, tmp_path / "s.tsv")
        back = parse_ucr_tsv(tmp_path / "s.tsv")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.labels == ds.labels


class TestSktime:
    HEADER = "@problemName toy\n@univariate false\n@classLabel true classA classB\n@data\n"

    def test_two_dims(self, tmp_path):
        ds = parse_sktime_ts(write(tmp_path, "a.ts", self.HEADER + "1,2:3,4:classA\n5,6:7,8:classB\n"))
        np.testing.assert_array_equal(ds.X[0], [[1, 2], [3, 4]])
        assert ds.labels[ds.y[0]] == "classA" and ds.name == "toy"

    def test_unlabelled(self, tmp_path):
        with pytest.raises(DataError, match="classLabel"):
            parse_sktime_ts(write(tmp_path, "a.ts", "@classLabel false\n@data\n1,2:3,4\n"))

    def test_missing_data_section(self, tmp_path):
        with pytest.raises(DataError, match="@data"):
            parse_sktime_ts(write(tmp_path, "a.ts", "@problemName x\n"))

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(DataError, match="dimensions"):
            parse_sktime_ts(write(tmp_path, "a.ts", self.HEADER + "1,2:3,4:classA\n1,2:classB\n"))

    def test_unequal_lengths(self, tmp_path):
        with pytest.raises(DataError, match="unequal"):
            parse_sktime_ts(write(tmp_path, "a.ts", self.HEADER + "1,2:3,4:classA\n1,2,3:4,5,6:classB\n"))

    def test_round_trip(self, tmp_path, rng):
        ds = Dataset(rng.normal(size=(5, 3, 7)), [0, 1, 1, 0, 1], ("x", "y"), "multi")
        write_sktime_ts(ds, tmp_path / "m.ts")
        back = load_dataset(tmp_path / "m.ts")
        np.testing.assert_array_equal(back.X, ds.X)
        np.testing.assert_array_equal(back.y, ds.y)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_dataset(tmp_path / "nope.tsv")


class TestSplit:
    def test_balanced_ten(self):
        ds = synth_dataset("spike", 10, 16, seed=0)
        tr, va = split_train_val(ds, 0.2, seed=1)
        assert va.counts().tolist() == [1, 1] and len(tr) == 8

    def test_deterministic(self):
        ds = synth_dataset("mixed", 30, 16, seed=0)
        a, b = split_train_val(ds, seed=5), split_train_val(ds, seed=5)
        np.testing.assert_array_equal(a[1].X, b[1].X)

    @pytest.mark.filterwarnings("ignore:class")
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(0, 2), min_size=2, max_size=40), st.integers(0, 1000))
    def test_partition(self, ys, seed):
        y = np.array(ys)
        X = np.arange(len(y), dtype=float)[:, None, None]
        ds = Dataset(X, y, ("a", "b", "c"))
        tr, va = split_train_val(ds, seed=seed)
        got = np.concatenate([tr.X[:, 0, 0], va.X[:, 0, 0]])
        np.testing.assert_array_equal(np.sort(got), X[:, 0, 0])
        for c in range(3):
            if (y == c).sum() >= 2:
                assert (tr.y == c).sum() >= 1 and (va.y == c).sum() >= 1

    def test_singleton_class_warns(self):
        ds = Dataset(np.zeros((5, 1, 3)), [0, 0, 0, 0, 1], ("a", "b"))
        with pytest.warns(UserWarning, match="single sample"):
            tr, va = split_train_val(ds)
        assert (tr.y == 1).sum() == 1 and (va.y == 1).sum() == 0

    def test_empty(self):
        with pytest.raises(DataError):
            split_train_val(Dataset(np.zeros((0, 1, 3)), [], ("a",)))


class TestWeights:
    def test_balanced(self):
        np.testing.assert_array_equal(class_weights(np.array([0, 1, 0, 1])), [1.0, 1.0])

    def test_three_to_one(self):
        np.testing.assert_allclose(class_weights(np.array([0, 0, 0, 1])), [0.5, 1.5])

    def test_single_class(self):
        with pytest.warns(UserWarning):
            np.testing.assert_array_equal(class_weights(np.array([0, 0])), [1.0])

    def test_inverse_frequency_oracle(self, rng):
        y = rng.integers(0, 4, 50)
        counts = np.bincount(y, minlength=4)
        w = class_weights(y)
        assert w.mean() == pytest.approx(1.0)
        np.testing.assert_allclose(w * counts, (w * counts)[0])


class TestZNorm:
    def test_train_statistics(self, rng):
        ds = Dataset(rng.normal(3.0, 2.0, size=(20, 2, 15)), np.arange(20) % 2, ("a", "b"))
        z = ZNorm.fit(ds).apply(ds)
        np.testing.assert_allclose(z.X.mean(axis=(0, 2)), 0.0, atol=1e-9)
        np.testing.assert_allclose(z.X.std(axis=(0, 2)), 1.0, atol=1e-6)

    def test_constant_channel(self):
        ds = Dataset(np.ones((4, 1, 5)), [0, 1, 0, 1], ("a", "b"))
        assert np.isfinite(ZNorm.fit(ds).apply(ds).X).all()


class TestSynthetic:
    @pytest.mark.parametrize("kind", SYNTH_KINDS)
    def test_rule_oracle_perfect(self, kind):
        ds = synth_dataset(kind, 200, 128, seed=7)
        np.testing.assert_array_equal(rule_classify(kind, ds.X), ds.y)

    @pytest.mark.parametrize("kind", SYNTH_KINDS)
    def test_balanced_and_deterministic(self, kind):
        a, b = synth_dataset(kind, 41, 32, seed=2), synth_dataset(kind, 41, 32, seed=2)
        np.testing.assert_array_equal(a.X, b.X)
        assert abs(int(a.counts()[0]) - int(a.counts()[1])) <= 1

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_dataset("chirp", 10, 32)
