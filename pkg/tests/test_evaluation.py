import json
import math
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazehoi.data import load_annotations
from gazehoi.errors import SchemaError
from gazehoi.evaluation import (
    GTTriplet, MetricsReport, PredictedTriplet, anticipation_filter, assign_pairs,
    average_precision, build_eval_frames, default_thresholds, detection_mode_accounting,
    evaluate, match_triplet, mean_ap, personwise_metrics, personwise_scores, rank_key,
    read_predictions, threshold_sweep, write_predictions, write_sweep_csv,
)
from gazehoi.geometry import BoundingBox, iou

B = BoundingBox
H = B(0, 0, 10, 20)
O = B(20, 0, 30, 10)


def fixture_videos():
    return load_annotations(resources.files("gazehoi") / "fixtures" / "two_person_park.json")


def pred(conf, predicate=1, frame=0, hb=H, ob=O, cls=5, video=0):
    return PredictedTriplet(video, frame, hb, ob, cls, predicate, conf)


def gt(predicate=1, frame=0, hb=H, ob=O, cls=5, video=0):
    return GTTriplet(video, frame, hb, ob, cls, predicate)


def oracle_ap(preds, gts):
    """Greedy matching and prefix enumeration written without the kernels."""
    ranked = sorted(preds, key=rank_key)
    used, tp = set(), []
    for p in ranked:
        best, best_v = None, -1.0
        for j, g in enumerate(gts):
            if j in used or (g.video_id, g.frame) != (p.video_id, p.frame):
                continue
            ih, io = iou(p.human_box, g.human_box), iou(p.object_box, g.object_box)
            if ih > 0.5 and io > 0.5 and min(ih, io) > best_v:
                best, best_v = j, min(ih, io)
        tp.append(best is not None)
        if best is not None:
            used.add(best)
    n = len(gts)
    prec = [sum(tp[:i + 1]) / (i + 1) for i in range(len(tp))]
    rec = [sum(tp[:i + 1]) / n for i in range(len(tp))]
    ap, prev = 0.0, 0.0
    for i, hit in enumerate(tp):
        if hit:
            ap += (rec[i] - prev) * max(prec[i:])
            prev = rec[i]
    return ap


def random_instance(rng):
    n_gt = int(rng.integers(1, 6))
    gts = []
    for _ in range(n_gt):
        x, y = rng.integers(0, 40, size=2)
        gts.append(gt(frame=int(rng.integers(0, 2)), hb=B(x, y, x + 10, y + 10),
                      ob=B(x + 5, y, x + 12, y + 8)))
    preds = []
    for _ in range(int(rng.integers(0, 21))):
        g = gts[int(rng.integers(n_gt))]
        d = rng.integers(-3, 4, size=4)
        frame = g.frame if rng.random() < 0.8 else 1 - g.frame
        preds.append(pred(round(float(rng.random()), 1), frame=frame,
                          hb=B(g.human_box.x1 + d[0], g.human_box.y1, g.human_box.x2 + d[0],
                               g.human_box.y2 + d[1]),
                          ob=B(g.object_box.x1 + d[2], g.object_box.y1, g.object_box.x2 + d[2],
                               g.object_box.y2 + d[3])))
    return preds, gts


# ---------------------------------------------------------------- matching and AP


def test_match_triplet_rules():
    assert match_triplet(pred(0.9), gt())
    assert not match_triplet(pred(0.9, predicate=2), gt())
    assert not match_triplet(pred(0.9, cls=6), gt())
    half = B(0, 0, 10, 10)  # IoU with H is exactly 0.5
    assert iou(half, H) == 0.5
    assert not match_triplet(pred(0.9, hb=half), gt())


def test_confidence_range_enforced():
    with pytest.raises(ValueError):
        pred(1.5)
    with pytest.raises(ValueError):
        pred(math.nan)


def test_ap_examples(kernel_backend):
    assert average_precision([pred(0.9)], [gt()]) == 1.0
    wrong = pred(0.9, hb=B(50, 50, 60, 60))
    assert average_precision([wrong, pred(0.5)], [gt()]) == 0.5
    assert math.isnan(average_precision([pred(0.9)], []))
    assert average_precision([], [gt()]) == 0.0


def test_ap_duplicate_detection_is_false_positive():
    assert average_precision([pred(0.9), pred(0.8)], [gt()]) == 1.0
    assert average_precision([pred(0.9), pred(0.8)], [gt(), gt(frame=1)]) == 0.5


def test_ap_matches_prefix_oracle(kernel_backend):
    rng = np.random.default_rng(0)
    for _ in range(500):
        preds, gts = random_instance(rng)
        assert average_precision(preds, gts) == pytest.approx(oracle_ap(preds, gts), abs=1e-12)


def test_ap_tie_break_is_order_independent():
    a = pred(0.5, frame=0)
    b = pred(0.5, frame=1)
    gts = [gt(frame=1)]
    assert average_precision([a, b], gts) == average_precision([b, a], gts) == 0.5


def test_map_invariant_under_rescaling():
    rng = np.random.default_rng(3)
    preds, gts = random_instance(rng)
    scaled = [PredictedTriplet(p.video_id, p.frame, p.human_box, p.object_box, p.object_class,
                               p.predicate, p.confidence * 0.37) for p in preds]
    assert mean_ap(preds, gts).per_category == mean_ap(scaled, gts).per_category


def test_mean_ap_perfect_and_partition():
    gts = [gt(predicate=1, frame=f) for f in range(30)] + [gt(predicate=2, frame=f) for f in range(3)]
    preds = [pred(0.9, g.predicate, g.frame) for g in gts]
    m = mean_ap(preds, gts)
    assert (m.full, m.nonrare, m.rare) == (1.0, 1.0, 1.0)
    assert m.rare_categories == {(5, 2)} and m.nonrare_categories == {(5, 1)}
    assert m.rare_categories | m.nonrare_categories == set(m.per_category)


def test_mean_ap_three_categories_oracle():
    gts = [gt(1), gt(2), gt(3)]
    preds = [pred(0.9, 1), pred(0.9, 2, hb=B(50, 50, 60, 60)), pred(0.4, 2), pred(0.3, 3, cls=6)]
    m = mean_ap(preds, gts)
    assert m.per_category == {(5, 1): 1.0, (5, 2): 0.5, (5, 3): 0.0}
    assert m.full == pytest.approx(0.5)


def test_zero_gt_category_excluded():
    m = mean_ap([pred(0.9, 1), pred(0.9, 7)], [gt(1)])
    assert set(m.per_category) == {(5, 1)} and m.full == 1.0


# ---------------------------------------------------------------- person-wise


def test_personwise_examples():
    assert personwise_scores({"a", "b"}, [("a", 0.9), ("b", 0.8)]) == (1.0, 1.0, 1.0, 1.0)
    rec, prec, acc, f1 = personwise_scores({"a", "b"}, [("a", 0.9), ("c", 0.8)])
    assert (rec, prec, f1) == (0.5, 0.5, 0.5) and acc == pytest.approx(1 / 3)
    assert personwise_scores({"a"}, []) == (0.0, 0.0, 0.0, 0.0)
    assert personwise_scores(set(), [("a", 0.9)]) == (0.0, 0.0, 0.0, 0.0)
    assert personwise_scores(set(), []) is None


def test_personwise_threshold_and_topk():
    z = [(c, 0.9 - 0.1 * i) for i, c in enumerate("abcdefg")]
    rec, prec, _, _ = personwise_scores(set("abcdefg"), z, k=5, threshold=0.3)
    assert rec == pytest.approx(5 / 7) and prec == 1.0
    rec, _, _, _ = personwise_scores({"a"}, [("a", 0.3)], threshold=0.3)
    assert rec == 0.0  # strict threshold


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 9), max_size=6),
       st.lists(st.tuples(st.integers(0, 9), st.floats(0, 1)), max_size=12),
       st.integers(1, 6), st.floats(0.01, 0.99))
def test_personwise_invariants(y, z, k, thr):
    s = personwise_scores(y, z, k, thr)
    if s is None:
        return
    rec, prec, acc, f1 = s
    assert 0 <= acc <= min(rec, prec) + 1e-12
    if rec + prec > 0:
        assert f1 == pytest.approx(2 * rec * prec / (rec + prec))
    else:
        assert f1 == 0


def test_assign_pairs_greedy_by_iou_product():
    frames = build_eval_frames(fixture_videos(), 0)
    fr = frames[0]
    dets = [(g.human_box, g.object_box, g.object_class) for g in reversed(fr.pairs)]
    m = assign_pairs(dets, fr.pairs)
    assert {i: fr.pairs[j].object_id for i, j in m.items()} == {
        i: g.object_id for i, g in enumerate(reversed(fr.pairs))}


def perfect_predictions(frames, conf=0.9):
    out = []
    for fr in frames:
        for g in fr.pairs:
            for q in g.predicates:
                out.append(PredictedTriplet(fr.video_id, fr.t, g.human_box, g.object_box,
                                            g.object_class, q, conf, g.human_id, g.object_id))
    return out


def test_perfect_predictions_on_fixture():
    frames = build_eval_frames(fixture_videos(), 0)
    preds = perfect_predictions(frames)
    pw = personwise_metrics(frames, preds)
    assert (pw.recall, pw.precision, pw.accuracy, pw.f1) == (1.0, 1.0, 1.0, 1.0)
    assert pw.humans == 11  # human 1 at six frames, human 2 at five
    m = mean_ap(preds, [g for fr in frames for g in fr.triplets()])
    assert (m.full, m.rare) == (1.0, 1.0) and m.nonrare is None


def test_personwise_fixture_invariants():
    frames = build_eval_frames(fixture_videos(), 0)
    rng = np.random.default_rng(2)
    preds = [PredictedTriplet(p.video_id, p.frame, p.human_box, p.object_box, p.object_class,
                              int(rng.integers(0, 12)), float(rng.random()))
             for p in perfect_predictions(frames) for _ in range(3)]
    pw = personwise_metrics(frames, preds)
    for _, (rec, prec, acc, f1) in pw.per_human:
        assert acc <= min(rec, prec) + 1e-12
        if rec + prec:
            assert f1 == pytest.approx(2 * rec * prec / (rec + prec))


def test_same_class_objects_are_distinct_identities():
    # two cups, one predicate: identity includes the matched object instance
    raw = {"videos": [{"id": 1, "width": 100, "height": 100, "tracks": [
        {"track_id": 1, "class_id": 0, "boxes": {"0": [0, 0, 20, 50]}},
        {"track_id": 2, "class_id": 26, "boxes": {"0": [30, 0, 40, 10]}},
        {"track_id": 3, "class_id": 26, "boxes": {"0": [60, 0, 70, 10]}}],
        "frames": [{"t": 0, "hois": [{"h": 1, "o": 2, "predicates": [9]}]}]}]}
    from gazehoi.data import parse_annotations
    frames = build_eval_frames(parse_annotations(raw), 0)
    fr = frames[0]
    wrong = [g for g in fr.pairs if g.object_id == 3][0]
    p = PredictedTriplet(1, 0, wrong.human_box, wrong.object_box, 26, 9, 0.9)
    pw = personwise_metrics(frames, [p])
    assert (pw.recall, pw.precision) == (0.0, 0.0)


def test_frame_averaging_flag():
    frames = build_eval_frames(fixture_videos(), 0)
    preds = perfect_predictions(frames)[:-1]
    a = personwise_metrics(frames, preds, average="human")
    b = personwise_metrics(frames, preds, average="frame")
    assert a.recall != b.recall
    with pytest.raises(ValueError):
        personwise_metrics(frames, preds, average="video")


# ---------------------------------------------------------------- protocol


def test_anticipation_filter_identity_when_pairs_persist():
    frames = [f for f in build_eval_frames(fixture_videos(), 1) if f.t in (1, 2)]
    preds = perfect_predictions(frames)
    out = anticipation_filter(preds, frames)
    assert out.predictions == preds and out.dropped_predictions == 0 and out.excluded_humans == 0


def test_anticipation_filter_vanishing_bench():
    frames = build_eval_frames(fixture_videos(), 1)
    preds = []
    for fr in frames:
        for g in fr.pairs:
            preds.append(PredictedTriplet(fr.video_id, fr.t, g.human_box, g.object_box,
                                          g.object_class, 3, 0.5))
    out = anticipation_filter(preds, frames)
    # bench (track 4) is present up to t=3, so only anchor t=3 loses its two bench pairs
    assert out.dropped_predictions == 2
    assert all(not (p.frame == 3 and p.object_class == 9) for p in out.predictions)
    # human 2 enters at t=1 and nobody leaves
    assert out.excluded_humans == 0


def test_detection_accounting_noop_and_empty_frame():
    frames = build_eval_frames(fixture_videos(), 0)
    preds = perfect_predictions(frames)
    assert detection_mode_accounting(frames, preds).empty_frames == []
    missing = [p for p in preds if p.frame != 2]
    acct = detection_mode_accounting(frames, missing)
    assert acct.empty_frames == [(7, 2)] and acct.total_fn == 4
    assert acct.zero_prediction_humans == 2
    det = evaluate(frames, missing, mode="detection")
    orc = evaluate(frames, missing, mode="oracle")
    assert det.counts["gt_triplets"] == orc.counts["gt_triplets"] + 4


def test_detection_mode_matches_explicit_fn_recount():
    rng = np.random.default_rng(11)
    frames = build_eval_frames(fixture_videos(), 0)
    preds = [PredictedTriplet(p.video_id, p.frame, p.human_box, p.object_box, p.object_class,
                              p.predicate, float(rng.random()))
             for p in perfect_predictions(frames) if p.frame % 2 == 0]
    preds += [PredictedTriplet(p.video_id, p.frame, p.human_box, p.object_box, p.object_class,
                               3, float(rng.random()))
              for p in perfect_predictions(frames) if p.frame % 2 == 0]
    det = evaluate(frames, preds, mode="detection")
    orc = evaluate(frames, preds, mode="oracle")
    # brute force: AP per category over all GT, with empty-frame GT as explicit misses
    acct = detection_mode_accounting(frames, preds)
    kept = [g for fr in frames if fr.key not in set(acct.empty_frames) for g in fr.triplets()]
    cats = {(g.object_class, g.predicate) for fr in frames for g in fr.triplets()}
    aps = []
    for c in sorted(cats):
        ps = [p for p in preds if (p.object_class, p.predicate) == c]
        gs = [g for g in kept if (g.object_class, g.predicate) == c]
        aps.append(average_precision(ps, gs, extra_fn=acct.fn_by_category.get(c, 0))
                   if gs or acct.fn_by_category.get(c) else math.nan)
    assert det.map_full == pytest.approx(float(np.mean(aps)), abs=1e-12)
    assert det.map_full <= orc.map_full


def test_threshold_sweep_properties():
    frames = build_eval_frames(fixture_videos(), 0)
    rng = np.random.default_rng(5)
    preds = [PredictedTriplet(p.video_id, p.frame, p.human_box, p.object_box, p.object_class,
                              p.predicate, float(rng.uniform(0.1, 0.9)))
             for p in perfect_predictions(frames)]
    rows = threshold_sweep(frames, preds, default_thresholds())
    assert len(rows) == 19
    rec = [r["recall"] for r in rows]
    assert all(a >= b for a, b in zip(rec, rec[1:]))
    assert threshold_sweep(frames, preds, [0.95])[0]["recall"] == 0.0
    lo, hi = threshold_sweep(frames, preds, [0.2, 0.3])
    assert lo["recall"] > hi["recall"]
    with pytest.raises(ValueError):
        threshold_sweep(frames, preds, [1.0])


# ---------------------------------------------------------------- I/O


def test_report_schema_and_files(tmp_path):
    frames = build_eval_frames(fixture_videos(), 0)
    preds = perfect_predictions(frames)
    rep = evaluate(frames, preds, config={"seed": 1})
    rep.validate()
    rep.dump(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["mode"] == "oracle"
    bad = MetricsReport(1.5, None, None, rep.personwise, rep.counts, "oracle", 0)
    with pytest.raises(SchemaError):
        bad.validate()
    write_predictions(preds, tmp_path / "p.jsonl")
    assert read_predictions(tmp_path / "p.jsonl") == preds
    (tmp_path / "bad.jsonl").write_text('{"video": 1}\n')
    with pytest.raises(SchemaError):
        read_predictions(tmp_path / "bad.jsonl")
    write_sweep_csv(threshold_sweep(frames, preds, [0.2, 0.5]), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "threshold,recall,precision,accuracy,f1" and len(lines) == 3
