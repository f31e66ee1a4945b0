import json

import numpy as np
import pytest

from biasscan.attack import AttackConfig, iterate_attack
from biasscan.model import build_cnn
from biasscan.poison import TriggerSpec
from biasscan.scan import (CHUNK, PER_CATEGORY, PER_PAIR, footprint_statistic, load_bias_maps, save_bias_maps,
                           scan_algorithm_one, scan_algorithm_two, seed_batch)

MODEL = build_cnn(8)


def _one_by_one(cfg, ds, pairs=False):
    """Per-sample loop over the public primitives, float64 accumulation."""
    if pairs:
        cells = [(s, t) for s in range(10) for t in range(10) if s != t]
        sums = np.zeros((10, 10, 1, 28, 28))
        counts = np.zeros((10, 10), np.int64)
    else:
        cells = [(None, t) for t in range(10)]
        sums = np.zeros((10, 1, 28, 28))
        counts = np.zeros(10, np.int64)
    for s, t in cells:
        key = (2, s, t) if pairs else (1, t)
        for i in range(cfg.samples_per_cell):
            x0 = seed_batch(cfg.seed_kind, key, i, 1, cfg.seed, ds)
            x, pred = iterate_attack(MODEL, x0, t, cfg, y_source=s)
            bucket = (s, pred[0]) if pairs else pred[0]
            sums[bucket] += x[0]
            counts[bucket] += 1
    shape = (-1, 1, 1, 1) if not pairs else (10, 10, 1, 1, 1)
    return sums / np.maximum(counts, 1).reshape(shape), counts


@pytest.mark.parametrize("kind", ["data", "noise", "blank"])
def test_algorithm_one_matches_per_sample_loop(kind, tiny_dataset):
    cfg = AttackConfig(epsilon=0.05, iterations=2, seed_kind=kind, samples_per_cell=5, seed=1)
    bms = scan_algorithm_one(MODEL, cfg, tiny_dataset)
    maps, counts = _one_by_one(cfg, tiny_dataset)
    np.testing.assert_array_equal(bms.counts, counts)
    np.testing.assert_allclose(bms.maps, maps, atol=1e-6)
    assert bms.mode == PER_CATEGORY and bms.maps.shape == (10, 1, 28, 28)
    assert bms.cell_counts.sum(axis=1).tolist() == [5] * 10
    np.testing.assert_array_equal(bms.cell_counts.sum(axis=0), bms.counts)
    assert not bms.maps[bms.empty].any()


def test_algorithm_two_matches_per_sample_loop(tiny_dataset):
    cfg = AttackConfig(epsilon=0.05, iterations=2, seed_kind="data", loss_kind="paired",
                       samples_per_cell=2, seed=3)
    bms = scan_algorithm_two(MODEL, cfg, tiny_dataset)
    maps, counts = _one_by_one(cfg, tiny_dataset, pairs=True)
    np.testing.assert_array_equal(bms.counts, counts)
    np.testing.assert_allclose(bms.maps, maps, atol=1e-6)
    assert bms.mode == PER_PAIR and bms.maps.shape == (10, 10, 1, 28, 28)
    # diagonal cells are never generated
    for s in range(10):
        assert bms.cell_counts[s, s].sum() == 0
        assert bms.cell_counts[s].sum() == 9 * 2
    assert bms.skipped.trace() == 10
    np.testing.assert_allclose(bms.bucket_share.sum(axis=1), 1.0)


def test_worker_count_does_not_change_results(tiny_dataset):
    cfg = AttackConfig(epsilon=0.1, iterations=2, seed_kind="noise", samples_per_cell=CHUNK + 6, seed=4)
    one = scan_algorithm_one(MODEL, cfg, tiny_dataset, workers=1)
    many = scan_algorithm_one(MODEL, cfg, tiny_dataset, workers=4)
    assert one.maps.tobytes() == many.maps.tobytes()
    np.testing.assert_array_equal(one.cell_counts, many.cell_counts)


def test_seed_batches_are_position_addressed(tiny_dataset):
    full = seed_batch("noise", (1, 3), 0, 10, 7, tiny_dataset)
    part = seed_batch("noise", (1, 3), 4, 3, 7, tiny_dataset)
    np.testing.assert_array_equal(full[4:7], part)
    assert not np.array_equal(full, seed_batch("noise", (1, 4), 0, 10, 7, tiny_dataset))
    # data seeds exhaust a permutation of the pool before repeating
    data = seed_batch("data", (1, 0), 0, len(tiny_dataset), 0, tiny_dataset)
    assert len({d.tobytes() for d in data}) == len(tiny_dataset)
    assert seed_batch("data", (1, 0), 0, 50, 0, tiny_dataset).shape == (50, 1, 28, 28)
    with pytest.raises(ValueError):
        seed_batch("data", (1, 0), 0, 1, 0, None)
    with pytest.raises(ValueError):
        seed_batch("sketch", (1, 0), 0, 1, 0, tiny_dataset)


def test_loss_kind_must_match_algorithm(tiny_dataset):
    with pytest.raises(ValueError):
        scan_algorithm_one(MODEL, AttackConfig(loss_kind="paired"), tiny_dataset)
    with pytest.raises(ValueError):
        scan_algorithm_two(MODEL, AttackConfig(), tiny_dataset)


def test_rates_and_shares():
    cfg = AttackConfig(epsilon=0.0, iterations=1, seed_kind="blank", samples_per_cell=3)
    bms = scan_algorithm_one(MODEL, cfg)
    # with eps = 0 every blank seed gets the same prediction
    (winner,) = np.flatnonzero(bms.counts)
    assert bms.counts[winner] == 30 and bms.bucket_share[winner] == 1.0
    np.testing.assert_array_equal(bms.rates[:, winner], 1.0)
    doubled = bms.scaled(2.0)
    np.testing.assert_array_equal(doubled.maps, bms.maps * 2)


def test_footprint_statistic():
    mask = TriggerSpec().mask()
    assert footprint_statistic(mask.astype(np.float32), mask) == pytest.approx(1.0)
    assert footprint_statistic(np.full((1, 28, 28), 0.3), mask) == pytest.approx(0.0)
    assert footprint_statistic(1.0 - mask, mask) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        footprint_statistic(np.zeros((28, 28)), np.zeros((28, 28), bool))
    with pytest.raises(ValueError):
        footprint_statistic(np.zeros((28, 28)), np.ones((28, 28), bool))
    with pytest.raises(ValueError):
        footprint_statistic(np.zeros((27, 28)), mask)


def test_save_and_load_round_trip(tmp_path, tiny_dataset):
    cfg = AttackConfig(epsilon=0.1, iterations=1, seed_kind="data", samples_per_cell=3)
    bms = scan_algorithm_one(MODEL, cfg, tiny_dataset)
    save_bias_maps(bms, tmp_path / "one")
    back = load_bias_maps(tmp_path / "one")
    assert back.maps.tobytes() == bms.maps.tobytes()
    np.testing.assert_array_equal(back.cell_counts, bms.cell_counts)
    assert back.config == cfg.to_dict()
    index = json.loads((tmp_path / "one" / "index.json").read_text())
    assert index["mode"] == PER_CATEGORY and len(index["files"]) == 10
    assert (tmp_path / "one" / "map_0.f32").stat().st_size == 28 * 28 * 4

    pairs = scan_algorithm_two(MODEL, AttackConfig(epsilon=0.1, iterations=1, loss_kind="paired",
                                                   samples_per_cell=1, seed_kind="blank"))
    save_bias_maps(pairs, tmp_path / "two")
    back = load_bias_maps(tmp_path / "two")
    assert back.mode == PER_PAIR and back.maps.tobytes() == pairs.maps.tobytes()
