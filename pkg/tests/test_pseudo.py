import numpy as np
import pytest

from robustdiff.pseudo import (
    EarlyStopPolicy,
    ensemble_update,
    init_pseudo,
    load_table,
    save_table,
    should_stop,
)


class TestInit:
    def test_all_zero_vectors(self):
        table = init_pseudo(3, 4)
        assert table.entries.shape == (3, 4)
        assert np.array_equal(table.entries, np.zeros((3, 4)))
        assert np.array_equal(table.update_count, np.zeros(3, dtype=np.int64))

    def test_degenerate_sizes_rejected(self):
        with pytest.raises(ValueError):
            init_pseudo(0, 4)
        with pytest.raises(ValueError):
            init_pseudo(4, 0)

    def test_all_entries_equal_after_init(self):
        table = init_pseudo(5, 3)
        for i in range(1, 5):
            assert np.array_equal(table.entries[0], table.entries[i])


class TestEnsembleUpdate:
    def test_alpha_one_keeps_entry(self):
        table = init_pseudo(2, 4)
        table.entries[1] = [1, 2, 3, 4]
        before = table.entries[1].copy()
        ensemble_update(table, 1, np.array([9.0, 9.0, 9.0, 9.0]), alpha=1.0)
        assert np.array_equal(table.entries[1], before)

    def test_alpha_zero_replaces_entry(self):
        table = init_pseudo(2, 4)
        new = np.array([5.0, -1.0, 0.0, 2.0])
        ensemble_update(table, 0, new, alpha=0.0)
        assert np.array_equal(table.entries[0], new)

    def test_alpha_point_one_value(self):
        # entry 0, estimate 1 -> 0.9
        table = init_pseudo(1, 1)
        ensemble_update(table, 0, np.array([1.0]), alpha=0.1)
        assert table.entries[0, 0] == pytest.approx(0.9)

    def test_geometric_contraction_exact(self):
        # alpha = 0.5 and target 0 so the decay is exact in binary floats
        table = init_pseudo(1, 1)
        table.entries[0, 0] = 1.0
        for k in range(1, 30):
            ensemble_update(table, 0, np.array([0.0]), alpha=0.5)
            assert table.entries[0, 0] == 0.5**k

    def test_geometric_contraction_general_alpha(self):
        alpha, c = 0.3, 2.5
        table = init_pseudo(1, 2)
        table.entries[0] = [4.0, -1.0]
        start = table.entries[0].copy()
        for k in range(1, 12):
            ensemble_update(table, 0, np.array([c, c]), alpha=alpha)
            want = alpha**k * (start - c) + c
            assert np.allclose(table.entries[0], want, rtol=1e-12)

    def test_update_count_and_duplicates(self):
        table = init_pseudo(3, 2)
        ensemble_update(table, np.array([1, 1, 2]), np.ones((3, 2)), alpha=0.5)
        assert list(table.update_count) == [0, 2, 1]
        # two sequential updates on index 1: 0 -> 0.5 -> 0.75
        assert table.entries[1, 0] == pytest.approx(0.75)

    def test_invalid_alpha_rejected(self):
        table = init_pseudo(1, 1)
        for bad in (-0.1, 1.1):
            with pytest.raises(ValueError):
                ensemble_update(table, 0, np.zeros(1), alpha=bad)

    def test_missing_index_rejected(self):
        table = init_pseudo(2, 1)
        with pytest.raises(IndexError):
            ensemble_update(table, 5, np.zeros(1), alpha=0.5)

    def test_nonfinite_update_rejected(self):
        table = init_pseudo(1, 2)
        with pytest.raises(ValueError):
            ensemble_update(table, 0, np.array([np.nan, 0.0]), alpha=0.5)

    def test_entries_remain_finite_random_sequences(self):
        rng = np.random.default_rng(1)
        table = init_pseudo(4, 3)
        for _ in range(200):
            idx = rng.integers(0, 4, size=8)
            ensemble_update(table, idx, rng.normal(size=(8, 3)), alpha=float(rng.uniform(0, 1)))
        assert np.all(np.isfinite(table.entries))

    def test_read_counter(self):
        table = init_pseudo(3, 2)
        assert table.reads == 0
        table.get(np.array([0, 1]))
        table.get(2)
        assert table.reads == 2


class TestEarlyStop:
    def test_before_budget(self):
        assert not should_stop(0, EarlyStopPolicy(500))

    def test_at_budget(self):
        assert should_stop(500, EarlyStopPolicy(500))

    def test_after_budget(self):
        assert should_stop(501, EarlyStopPolicy(500))

    def test_monotone(self):
        policy = EarlyStopPolicy(7)
        flags = [should_stop(i, policy) for i in range(20)]
        assert flags == sorted(flags)

    def test_invalid_budget(self):
        with pytest.raises(ValueError):
            EarlyStopPolicy(0)

    def test_negative_iteration_rejected(self):
        with pytest.raises(ValueError):
            should_stop(-1, EarlyStopPolicy(5))


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        table = init_pseudo(4, 3)
        table.entries[:] = np.random.default_rng(0).normal(size=(4, 3))
        path = tmp_path / "pseudo.txt"
        save_table(path, table)
        loaded = load_table(path)
        assert np.array_equal(loaded.entries, table.entries)

    def test_format_index_then_floats(self, tmp_path):
        table = init_pseudo(2, 2)
        table.entries[1] = [0.5, -0.25]
        path = tmp_path / "pseudo.txt"
        save_table(path, table)
        lines = path.read_text().splitlines()
        assert lines[0].split()[0] == "0"
        assert lines[1] == "1 0.5 -0.25"
