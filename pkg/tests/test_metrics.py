"""Metric tests: hand-built label maps plus randomized oracle cross-checks."""

import numpy as np

from ocdaseg.metrics import (
    MetricsReport,
    aggregate,
    aji,
    all_metrics,
    dice,
    match_instances,
    oracle_aji,
    oracle_dice,
    oracle_panoptic_quality,
    panoptic_quality,
)


def _blank(shape=(8, 8)):
    return np.zeros(shape, dtype=np.int32)


def test_dice_two_thirds():
    gt = _blank()
    gt[0, 0:4] = 1  # |G| = 4
    pred = _blank()
    pred[0, 2:4] = 1  # |P| = 2, overlap = 2
    assert abs(dice(pred, gt) - 2.0 / 3.0) < 1e-12


def test_dice_empty_cases():
    assert dice(_blank(), _blank()) == 1.0
    pred = _blank()
    pred[0, 0] = 1
    assert dice(pred, _blank()) == 0.0
    assert dice(_blank(), pred) == 0.0


def test_aji_half():
    gt = _blank()
    gt[2:4, 2:4] = 1  # 4 px
    pred = _blank()
    pred[2, 2:4] = 1  # 2 px, fully inside
    assert abs(aji(pred, gt) - 0.5) < 1e-12


def test_aji_tie_breaks_to_lower_pred_id():
    gt = _blank()
    gt[0, 0:2] = 1
    pred = _blank()
    pred[0, 0] = 5
    pred[0, 1] = 2  # identical IoU with gt 1; id 2 must be claimed
    # claimed pair: I=1, U=2; leftover pred 5 adds 1 to union
    assert abs(aji(pred, gt) - 1.0 / 3.0) < 1e-12


def test_aji_empty_convention():
    assert aji(_blank(), _blank()) == 1.0


def test_pq_worked_example():
    gt = _blank()
    gt[0:2, 0:2] = 1
    gt[4:6, 4:6] = 2
    pred = _blank()
    pred[0:2, 0:2] = 7  # exact match for gt 1, nothing for gt 2
    dq, sq, pq = panoptic_quality(pred, gt)
    assert abs(dq - 2.0 / 3.0) < 1e-12
    assert sq == 1.0
    assert abs(pq - 2.0 / 3.0) < 1e-12


def test_pq_empty_convention():
    assert panoptic_quality(_blank(), _blank()) == (1.0, 1.0, 1.0)


def test_iou_exactly_half_is_not_a_match():
    gt = _blank()
    gt[0, 0:2] = 1
    pred = _blank()
    pred[0, 1:3] = 1  # IoU = 1/3 -> no; build exact 0.5 instead
    gt2 = _blank()
    gt2[0, 0:2] = 1
    pred2 = _blank()
    pred2[0, 0:4] = 1  # I=2, U=4 -> IoU exactly 0.5
    m = match_instances(pred2, gt2)
    assert m.pairs == []
    dq, sq, pq = panoptic_quality(pred2, gt2)
    assert dq == 0.0 and sq == 0.0 and pq == 0.0


def test_match_result_bookkeeping():
    gt = _blank()
    gt[0:2, 0:2] = 3
    gt[5:7, 5:7] = 9
    pred = _blank()
    pred[0:2, 0:2] = 4
    pred[3, 3] = 8
    m = match_instances(pred, gt)
    assert m.pairs == [(3, 4)]
    assert m.ious == [1.0]
    assert m.unmatched_gt == [9]
    assert m.unmatched_pred == [8]


def _random_labels(rng, shape=(20, 20), max_id=6):
    # Arbitrary id maps are fine: none of the metrics assume connectivity
    # or contiguous ids.
    labels = rng.integers(0, max_id + 1, size=shape).astype(np.int32)
    return labels * rng.integers(1, 4)  # stretch ids so they are sparse


def test_fast_matches_oracle_on_random_maps():
    rng = np.random.default_rng(42)
    for _ in range(30):
        pred = _random_labels(rng)
        gt = _random_labels(rng)
        assert abs(dice(pred, gt) - oracle_dice(pred, gt)) < 1e-12
        assert abs(aji(pred, gt) - oracle_aji(pred, gt)) < 1e-12
        fast = panoptic_quality(pred, gt)
        slow = oracle_panoptic_quality(pred, gt)
        assert np.allclose(fast, slow, atol=1e-12)


def test_fast_matches_oracle_on_sparse_blobs():
    rng = np.random.default_rng(5)
    for _ in range(10):
        pred = np.zeros((24, 24), dtype=np.int32)
        gt = np.zeros((24, 24), dtype=np.int32)
        for k in range(1, rng.integers(2, 6)):
            r, c = rng.integers(0, 18, size=2)
            gt[r : r + 5, c : c + 5] = k
            jitter = rng.integers(-2, 3, size=2)
            pred[r + jitter[0] : r + jitter[0] + 5, c + jitter[1] : c + jitter[1] + 5] = k * 3
        pred = np.clip(pred, 0, None)
        assert abs(aji(pred, gt) - oracle_aji(pred, gt)) < 1e-12
        assert np.allclose(panoptic_quality(pred, gt), oracle_panoptic_quality(pred, gt))


def test_aggregate_and_report_round_trip(tmp_path):
    gt = _blank()
    gt[0:2, 0:2] = 1
    pred = gt.copy()
    rows = [all_metrics(pred, gt), all_metrics(_blank(), gt)]
    agg = aggregate(rows)
    assert abs(agg["dice"] - 0.5) < 1e-12

    report = MetricsReport.from_images(["a", "b"], [pred, _blank()], [gt, gt], meta={"split": "x"})
    p = tmp_path / "m.json"
    report.write_json(p)
    again = MetricsReport.load_json(p)
    assert again.mean == report.mean
    assert again.to_json() == report.to_json()
    report.write_csv(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().startswith("image_id")
