
import numpy as np
import pytest

from avseg.evaluate import (
    Detection,
    EvalResult,
    InstanceTrack,
    build_tracks,
    classification_accuracy,
    compute_ap,
    format_results,
    video_iou,
)


def track(class_id, masks, score=1.0, track_id=0):
    return InstanceTrack(track_id=track_id, class_id=class_id, score=score, masks=masks)


def blob(h, w, y0, x0, size):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y0 + size, x0:x0 + size] = True
    return m


# ---------------------------------------------------------------------------
# independent oracle: AP maximized over every injective pred->gt assignment

def brute_force_ap(preds, gts, threshold):
    """preds/gts: lists of (video_index, InstanceTrack). Tries every feasible
    assignment of predictions to ground truths and returns the best 101-point
    AP achievable."""
    num_gt = len(gts)
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].score)

    feasible = {}
    for i in order:
        vid, p = preds[i]
        feasible[i] = [j for j, (gvid, g) in enumerate(gts)
                       if gvid == vid and video_iou(p, g) >= threshold]

    best = 0.0
    def ap_of(assignment):
        tp = [assignment.get(i) is not None for i in order]
        if num_gt == 0:
            return 0.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / num_gt
        precision = cum_tp / np.arange(1, len(tp) + 1)
        ap = 0.0
        for r in np.linspace(0, 1, 101):
            pr = precision[recall >= r - 1e-12]
            ap += pr.max() if len(pr) else 0.0
        return ap / 101

    def recurse(k, assignment, used):
        nonlocal best
        if k == len(order):
            best = max(best, ap_of(assignment))
            return
        i = order[k]
        recurse(k + 1, {**assignment, i: None}, used)
        for j in feasible[i]:
            if j not in used:
                recurse(k + 1, {**assignment, i: j}, used | {j})

    recurse(0, {}, frozenset())
    return best


class TestVideoIoU:
    def test_identical_tracks(self):
        t = track(0, {0: blob(16, 16, 2, 2, 5), 1: blob(16, 16, 3, 3, 5)})
        assert video_iou(t, t) == 1.0

    def test_disjoint_tracks(self):
        a = track(0, {0: blob(16, 16, 0, 0, 4)})
        b = track(0, {0: blob(16, 16, 10, 10, 4)})
        assert video_iou(a, b) == 0.0

    def test_third_overlap_any_frame_count(self):
        for n_frames in (1, 3, 7):
            a = track(0, {f: np.array([[1, 1, 0, 0]], dtype=bool) for f in range(n_frames)})
            b = track(0, {f: np.array([[0, 1, 1, 0]], dtype=bool) for f in range(n_frames)})
            assert video_iou(a, b) == pytest.approx(1 / 3)

    def test_absent_frames_count_as_empty(self):
        a = track(0, {0: blob(8, 8, 0, 0, 4), 1: blob(8, 8, 0, 0, 4)})
        b = track(0, {0: blob(8, 8, 0, 0, 4)})
        assert video_iou(a, b) == pytest.approx(0.5)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        a = track(0, {0: rng.random((8, 8)) > 0.5})
        b = track(0, {0: rng.random((8, 8)) > 0.5})
        assert video_iou(a, b) == video_iou(b, a)

    def test_empty_vs_empty_is_zero(self):
        a = track(0, {})
        b = track(0, {})
        assert video_iou(a, b) == 0.0

    def test_shape_mismatch(self):
        a = track(0, {0: blob(8, 8, 0, 0, 2)})
        b = track(0, {0: blob(9, 9, 0, 0, 2)})
        with pytest.raises(ValueError):
            video_iou(a, b)


class TestBuildTracks:
    def det(self, frame, emb, class_id=0, score=0.9, mask=None):
        return Detection(frame_index=frame, class_id=class_id, score=score,
                         embedding=np.asarray(emb, dtype=float),
                         mask=mask if mask is not None else blob(8, 8, 0, 0, 3))

    def test_single_instance_one_track(self):
        dets = [self.det(f, [1.0, 0.0]) for f in range(4)]
        tracks = build_tracks(dets, threshold=0.5)
        assert len(tracks) == 1
        assert sorted(tracks[0].masks) == [0, 1, 2, 3]

    def test_all_below_threshold_one_track_each(self):
        # orthogonal embeddings never associate
        dets = [self.det(0, [1, 0, 0]), self.det(1, [0, 1, 0]), self.det(2, [0, 0, 1])]
        tracks = build_tracks(dets, threshold=0.5)
        assert len(tracks) == 3

    def test_class_must_match(self):
        dets = [self.det(0, [1, 0], class_id=0), self.det(1, [1, 0], class_id=1)]
        assert len(build_tracks(dets, threshold=0.5)) == 2

    def test_track_score_is_mean(self):
        dets = [self.det(0, [1, 0], score=0.8), self.det(1, [1, 0], score=0.4)]
        (t,) = build_tracks(dets, threshold=0.5)
        assert t.score == pytest.approx(0.6)

    def test_two_interleaved_instances_vs_exhaustive_assignment(self):
        # well-separated embeddings; oracle: best of all ways to split the
        # detections into identity-consistent tracks is the 2-track split
        e_a, e_b = np.array([1.0, 0.05]), np.array([0.05, 1.0])
        dets = []
        for f in range(3):
            dets.append(self.det(f, e_a + 0.01 * f, mask=blob(8, 8, 0, 0, 3)))
            dets.append(self.det(f, e_b - 0.01 * f, mask=blob(8, 8, 4, 4, 3)))
        tracks = build_tracks(dets, threshold=0.8)
        assert len(tracks) == 2
        for t in tracks:
            assert len(t.masks) == 3
            # all masks in one track come from the same instance
            ref = t.masks[0]
            assert all(np.array_equal(m, ref) for m in t.masks.values())


class TestComputeAP:
    def test_perfect_predictor(self):
        gt = [[track(0, {0: blob(8, 8, 0, 0, 4)}), track(1, {0: blob(8, 8, 4, 4, 3)})]]
        preds = [[track(0, {0: blob(8, 8, 0, 0, 4)}, score=0.9),
                  track(1, {0: blob(8, 8, 4, 4, 3)}, score=0.8)]]
        r = compute_ap(preds, gt)
        assert r.ap == pytest.approx(1.0)
        assert r.ar == pytest.approx(1.0)

    def test_no_predictions(self):
        gt = [[track(0, {0: blob(8, 8, 0, 0, 4)})]]
        r = compute_ap([[]], gt)
        assert r.ap == 0.0 and r.ar == 0.0

    def test_swapped_scores_halves_ap(self):
        g = blob(8, 8, 0, 0, 4)
        wrong = blob(8, 8, 4, 4, 3)
        gt = [[track(0, {0: g})]]
        # correct pred scored higher -> AP 1.0
        preds_hi = [[track(0, {0: g}, score=0.9, track_id=0),
                     track(0, {0: wrong}, score=0.5, track_id=1)]]
        assert compute_ap(preds_hi, gt, thresholds=[0.5]).ap == pytest.approx(1.0)
        # scores swapped -> precision 1/2 at recall 1 -> 101-point AP 0.5
        preds_lo = [[track(0, {0: g}, score=0.5, track_id=0),
                     track(0, {0: wrong}, score=0.9, track_id=1)]]
        assert compute_ap(preds_lo, gt, thresholds=[0.5]).ap == pytest.approx(0.5, abs=0.01)

    def test_ap_is_mean_of_thresholds(self):
        gt = [[track(0, {0: blob(8, 8, 0, 0, 4)})]]
        preds = [[track(0, {0: blob(8, 8, 0, 1, 4)}, score=0.9)]]  # partial overlap
        r = compute_ap(preds, gt)
        assert r.ap == pytest.approx(np.mean(list(r.ap_per_threshold.values())))

    def test_empty_class_excluded_from_mean(self):
        # class 1 has neither gt nor preds anywhere; result driven by class 0
        gt = [[track(0, {0: blob(8, 8, 0, 0, 4)})]]
        preds = [[track(0, {0: blob(8, 8, 0, 0, 4)}, score=0.9)]]
        r = compute_ap(preds, gt, thresholds=[0.5])
        assert set(r.per_class) == {0}
        assert r.ap == pytest.approx(1.0)

    def test_all_empty_warns_and_zero(self):
        with pytest.warns(UserWarning):
            r = compute_ap([[]], [[]])
        assert r.ap == 0.0

    def test_adding_correct_prediction_never_decreases_ap(self):
        g0, g1 = blob(16, 16, 0, 0, 4), blob(16, 16, 8, 8, 4)
        gt = [[track(0, {0: g0}), track(0, {0: g1}, track_id=1)]]
        partial = [[track(0, {0: g0}, score=0.9)]]
        fuller = [[track(0, {0: g0}, score=0.9), track(0, {0: g1}, score=0.8, track_id=1)]]
        assert compute_ap(fuller, gt).ap >= compute_ap(partial, gt).ap

    def test_matches_brute_force_oracle_on_random_cases(self):
        rng = np.random.default_rng(42)
        for case in range(25):
            n_videos = int(rng.integers(1, 3))
            gts, preds = [], []
            for v in range(n_videos):
                gts.append([])
                preds.append([])
                for k in range(int(rng.integers(0, 4))):
                    y, x = rng.integers(0, 10, 2)
                    gts[v].append(track(0, {0: blob(16, 16, y, x, 6)}, track_id=k))
                for k in range(int(rng.integers(0, 4))):
                    y, x = rng.integers(0, 10, 2)
                    preds[v].append(track(0, {0: blob(16, 16, y, x, 6)},
                                          score=float(rng.random()), track_id=10 + k))
            thr = 0.5
            flat_preds = [(v, t) for v in range(n_videos) for t in preds[v]]
            flat_gts = [(v, t) for v in range(n_videos) for t in gts[v]]
            if not flat_gts and not flat_preds:
                continue
            got = compute_ap(preds, gts, thresholds=[thr]).ap
            want = brute_force_ap(flat_preds, flat_gts, thr)
            assert got == pytest.approx(want, abs=1e-9), f"case {case}"

    def test_invalid_thresholds(self):
        with pytest.raises(ValueError):
            compute_ap([[]], [[]], thresholds=[])
        with pytest.raises(ValueError):
            compute_ap([[]], [[]], thresholds=[1.5])


class TestClassificationAccuracy:
    def test_correct_and_incorrect(self):
        g = blob(8, 8, 0, 0, 4)
        gt = [[track(0, {0: g}), track(1, {0: blob(8, 8, 4, 4, 3)}, track_id=1)]]
        preds = [[track(0, {0: g}, score=0.9),
                  track(0, {0: blob(8, 8, 4, 4, 3)}, score=0.8, track_id=1)]]
        # gt class 0 matched correctly; gt class 1 matched with wrong class
        assert classification_accuracy(preds, gt) == pytest.approx(0.5)
        assert classification_accuracy(preds, gt, classes={0}) == pytest.approx(1.0)
        assert classification_accuracy(preds, gt, classes={1}) == pytest.approx(0.0)

    def test_no_relevant_gt_returns_none(self):
        assert classification_accuracy([[]], [[]], classes={5}) is None


def test_format_results_both_modes():
    r = EvalResult(ap=0.5, ap_per_threshold={0.5: 0.5}, ar=0.25, per_class={0: 0.5})
    table = format_results(r, "table")
    assert "overall AP" in table
    records = format_results(r, "records")
    assert '"metric": "ap"' in records
    with pytest.raises(ValueError):
        format_results(r, "csv")
