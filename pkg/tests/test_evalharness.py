import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnncascade.evalharness import (ROC_HEADER, Annotation, AnnotationError, best_variant_iou,
                                    greedy_match, iou_ellipse_rect, iou_matrix, join_by_image,
                                    match_discrete, match_multiscale, match_rect_multiscale,
                                    multiscale_factors, parse_detections_jsonl, parse_fddb,
                                    parse_rect_csv, prf1, score_fddb, score_prf1, sweep_min_neighbors,
                                    write_csv)
from cnncascade.geometry import iou_rect, scale_about_center

# ------------------------------------------------------------------- IoU


@pytest.mark.parametrize("a,b,expected", [
    ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
    ((0, 0, 10, 10), (10, 0, 10, 10), 0.0),
    ((0, 0, 2, 2), (1, 0, 2, 2), 1 / 3),
    ((0, 0, 4, 4), (1, 1, 2, 2), 0.25),
])
def test_rect_iou_examples(a, b, expected):
    assert iou_rect(a, b) == pytest.approx(expected)


def test_ellipse_iou_with_bounding_box_is_quarter_pi():
    assert iou_ellipse_rect((20, 10, 0, 50, 50), (30, 40, 40, 20), subdiv=4) == pytest.approx(math.pi / 4, rel=0.02)


def test_ellipse_iou_with_inscribed_rect_is_two_over_pi():
    a, b = 20, 10
    rect = (50 - a / math.sqrt(2), 50 - b / math.sqrt(2), a * math.sqrt(2), b * math.sqrt(2))
    assert iou_ellipse_rect((a, b, 0, 50, 50), rect, subdiv=4) == pytest.approx(2 / math.pi, rel=0.02)


def test_quarter_turn_swaps_axes():
    rect = (40, 30, 20, 40)
    turned = iou_ellipse_rect((20, 10, math.pi / 2, 50, 50), rect, subdiv=2)
    assert turned == pytest.approx(iou_ellipse_rect((10, 20, 0, 50, 50), rect, subdiv=2), abs=0.01)


def test_ellipse_iou_disjoint_is_zero():
    assert iou_ellipse_rect((5, 5, 0, 0, 0), (100, 100, 10, 10)) == 0.0


def test_rotated_ellipse_bbox():
    bb = Annotation.ellipse("x", 10, 5, math.pi / 4, 0, 0).bbox()
    half = math.sqrt((100 + 25) / 2)
    assert bb == pytest.approx((-half, -half, 2 * half, 2 * half))


def test_annotation_validation():
    with pytest.raises(AnnotationError):
        Annotation("x", "circle", (1, 2, 3))
    with pytest.raises(AnnotationError):
        Annotation.rect("x", 0, 0, 0, 5)
    with pytest.raises(AnnotationError):
        Annotation("x", "ellipse", (1, 2, 3, 4))


# -------------------------------------------------------------- matching


def iterative_argmax_match(iou, threshold):
    """Independent greedy: repeatedly take the best remaining pair."""
    m = np.where(iou >= threshold, iou, -1.0).astype(float)
    pairs = []
    while m.size and m.max() >= 0:
        best = m.max()
        i, j = min(zip(*np.nonzero(m == best)))
        pairs.append((int(i), int(j)))
        m[i, :] = -1
        m[:, j] = -1
    return sorted(pairs)


iou_mats = st.integers(0, 2**31 - 1).flatmap(lambda seed: st.tuples(
    st.just(seed), st.integers(0, 6), st.integers(0, 6)))


@settings(max_examples=200, deadline=None)
@given(iou_mats, st.sampled_from([0.3, 0.5]))
def test_greedy_matches_iterative_oracle(args, threshold):
    seed, n_a, n_d = args
    rng = np.random.default_rng(seed)
    iou = np.round(rng.uniform(0, 1, (n_a, n_d)), 1)
    res = greedy_match(iou, threshold)
    assert sorted((i, j) for i, j, _ in res.matched) == iterative_argmax_match(iou, threshold)
    # maximality: no unmatched pair could still be matched
    for i, j in itertools.product(res.unmatched_annotations, res.unmatched_detections):
        assert iou[i, j] < threshold
    assert res.tp + res.fn == n_a and res.tp + res.fp == n_d


def test_greedy_tie_goes_to_lower_index():
    res = greedy_match(np.array([[0.8, 0.8], [0.8, 0.8]]))
    assert [(i, j) for i, j, _ in res.matched] == [(0, 0), (1, 1)]


def test_match_discrete_with_ellipses():
    anns = [Annotation.ellipse("a", 20, 10, 0, 50, 50), Annotation.rect("a", 0, 0, 10, 10)]
    res = match_discrete(anns, [(30, 40, 40, 20), (200, 200, 5, 5)])
    assert [(i, j) for i, j, _ in res.matched] == [(0, 0)]
    assert res.fn == 1 and res.fp == 1


# ------------------------------------------------------------ multiscale


def test_multiscale_factors():
    f = multiscale_factors()
    assert len(f) == 44 and f[0] == pytest.approx(0.9) and f[-1] == pytest.approx(1.2)
    assert np.allclose(np.diff(f), 0.3 / 43)


def test_multiscale_matches_slightly_larger_box():
    ann = (0, 0, 100, 100)
    assert match_multiscale(ann, scale_about_center(ann, 1.15))
    assert not match_multiscale(ann, scale_about_center(ann, 3.0))


def test_multiscale_rescues_box_that_fails_plain_iou():
    ann = (0, 0, 100, 100)
    det = scale_about_center(ann, 1.5)
    assert iou_rect(ann, det) == pytest.approx(1 / 1.5 ** 2)
    assert best_variant_iou(ann, det) == pytest.approx((1.2 / 1.5) ** 2)
    assert match_multiscale(ann, det)


def test_prf1():
    assert prf1(3, 1, 1) == pytest.approx((0.75, 0.75, 0.75))
    assert prf1(0, 0, 5) == (0.0, 0.0, 0.0)
    assert prf1(0, 0, 0) == (0.0, 0.0, 0.0)


def test_score_prf1_perfect_and_empty():
    anns = [Annotation.rect("a", 0, 0, 20, 20), Annotation.rect("a", 50, 50, 30, 30)]
    assert score_prf1(anns, [a.params for a in anns]) == (1.0, 1.0, 1.0)
    assert score_prf1(anns, []) == (0.0, 0.0, 0.0)
    assert match_rect_multiscale([], []).tp == 0


def test_min_neighbor_sweep():
    ann = [Annotation.rect("a", 0, 0, 20, 20)]
    recs = [{"x": 0, "y": 0, "w": 20, "h": 20, "neighbors": 3},
            {"x": 60, "y": 60, "w": 20, "h": 20, "neighbors": 1}]
    rows, mean = sweep_min_neighbors({"a": (ann, recs)})
    assert [r[0] for r in rows] == [1, 2, 3]
    assert rows[0][1:] == pytest.approx((0.5, 1.0, 2 / 3))
    assert rows[1][1:] == (1.0, 1.0, 1.0)
    assert mean == pytest.approx((2 / 3 + 2) / 3)


# ------------------------------------------------------------------ FDDB


def roc_fixture():
    r = Annotation.rect
    return {
        "1": ([r("1", 0, 0, 10, 10)], [((0, 0, 10, 10), 0.9), ((50, 50, 10, 10), 0.8)]),
        "2": ([r("2", 0, 0, 10, 10)], [((5, 0, 10, 10), 0.7)]),
        "3": ([], [((0, 0, 10, 10), 0.6)]),
        "4": ([r("4", 0, 0, 10, 10), r("4", 20, 0, 10, 10)],
              [((0, 0, 10, 10), 0.95), ((20, 0, 10, 10), 0.5), ((1, 0, 10, 10), 0.85)]),
        "5": ([r("5", 0, 0, 10, 10)], []),
    }


def test_roc_on_hand_computed_fixture():
    rows, continuous = score_fddb(roc_fixture())
    expected = [(0.95, 0, 0.2, 0.2), (0.9, 0, 0.4, 0.4), (0.85, 1, 0.4, 0.4), (0.8, 2, 0.4, 0.4),
                (0.7, 3, 0.4, 0.4), (0.6, 4, 0.4, 0.4), (0.5, 4, 0.6, 0.6)]
    assert len(rows) == len(expected)
    for got, want in zip(rows, expected):
        assert got[0] == pytest.approx(want[0]) and got[1] == want[1]
        assert got[2:] == pytest.approx(want[2:])
    assert continuous == pytest.approx(0.6)


def test_roc_explicit_thresholds_and_empty():
    rows, _ = score_fddb(roc_fixture(), thresholds=[2.0])
    assert rows == [(2.0, 0, 0.0, 0.0)]
    rows, cont = score_fddb({"x": ([Annotation.rect("x", 0, 0, 5, 5)], [])})
    assert rows == [(0.0, 0, 0.0, 0.0)] and cont == 0.0


def test_roc_is_monotone_in_threshold():
    rows, _ = score_fddb(roc_fixture())
    fps = [r[1] for r in rows]
    tprs = [r[2] for r in rows]
    assert fps == sorted(fps) and tprs == sorted(tprs)


# --------------------------------------------------------------- parsers


FDDB_TEXT = """2002/08/11/big/img_591
1
123.58 85.50 1.27 269.69 161.78  1
2002/08/26/big/img_265
2
67.36 44.13 -1.48 105.05 87.00  1
41.94 29.43 1.53 230.27 85.32  1
"""


def test_parse_fddb():
    anns = parse_fddb(FDDB_TEXT)
    assert list(anns) == ["2002/08/11/big/img_591", "2002/08/26/big/img_265"]
    assert anns["2002/08/26/big/img_265"][1].params == (41.94, 29.43, 1.53, 230.27, 85.32)


@pytest.mark.parametrize("text", ["img\nx\n", "img\n2\n1 2 3 4 5 1\n", "img\n1\n1 2 3\n"])
def test_parse_fddb_errors(text):
    with pytest.raises(AnnotationError):
        parse_fddb(text)


def test_parse_rect_csv():
    anns = parse_rect_csv("image,x,y,w,h\na,1,2,3,4\na,5,6,7,8\nb,0,0,1,1\n")
    assert [a.params for a in anns["a"]] == [(1, 2, 3, 4), (5, 6, 7, 8)]
    with pytest.raises(AnnotationError):
        parse_rect_csv("a,1,2\n")


def test_parse_detections_and_join():
    dets = parse_detections_jsonl('{"image": "a", "x": 1}\n\n{"image": "z", "x": 2}\n')
    assert set(dets) == {"a", "z"}
    with pytest.raises(AnnotationError):
        parse_detections_jsonl('{"x": 1}\n')
    with pytest.raises(AnnotationError):
        parse_detections_jsonl("not json\n")
    joined, extra = join_by_image({"a": [1], "b": [2]}, dets)
    assert joined == {"a": ([1], dets["a"]), "b": ([2], [])}
    assert extra == ["z"]


def test_write_csv_is_plain_lf():
    assert write_csv([(1, 0, 0.5, 0.25)], ROC_HEADER) == "threshold,fp,tpr,continuous\n1,0,0.5,0.25\n"


def test_iou_matrix_accepts_plain_rects():
    m = iou_matrix([(0, 0, 2, 2)], [(1, 0, 2, 2), (5, 5, 1, 1)])
    np.testing.assert_allclose(m, [[1 / 3, 0.0]])


def test_match_discrete_examples():
    anns = [Annotation.rect("a", 0, 0, 10, 10), Annotation.rect("a", 30, 0, 10, 10)]
    res = match_discrete(anns, [a.params for a in anns])
    assert res.tp == 2 and res.fp == 0 and res.fn == 0
    # overlap 40/7 of width 10: IoU (40/7) / (200 - 40/7) = 0.4
    det = (10 * (1 - 4 / 7), 0, 10, 10)
    assert iou_rect(anns[0].params, det) == pytest.approx(0.4)
    res = match_discrete(anns[:1], [det])
    assert (res.tp, res.fp, res.fn) == (0, 1, 1)


def test_crafted_four_by_four_matrix():
    iou = np.array([[0.9, 0.8, 0.0, 0.0],
                    [0.85, 0.6, 0.0, 0.0],
                    [0.0, 0.55, 0.7, 0.0],
                    [0.0, 0.0, 0.65, 0.4]])
    res = greedy_match(iou)
    assert sorted((i, j) for i, j, _ in res.matched) == iterative_argmax_match(iou, 0.5) == [(0, 0), (1, 1), (2, 2)]
    assert (res.fp, res.fn) == (1, 1)


def test_ellipse_inside_huge_rect_matches_area_ratio():
    rect = (0, 0, 200, 150)
    expected = math.pi * 20 * 12 / (200 * 150)
    assert iou_ellipse_rect((20, 12, 0.3, 100, 75), rect, subdiv=4) == pytest.approx(expected, rel=0.02)


def test_perfect_detector_reaches_full_tpr():
    fixture = {k: ([Annotation.rect(k, 0, 0, 10, 10)], [((0, 0, 10, 10), s)])
               for k, s in (("a", 0.9), ("b", 0.7), ("c", 0.8))}
    rows, continuous = score_fddb(fixture, thresholds=[0.1, 0.5, 0.69])
    assert all(fp == 0 and tpr == 1.0 for _, fp, tpr, _ in rows)
    assert continuous == pytest.approx(1.0)


def test_multiscale_matches_identical_box():
    assert match_multiscale((5, 5, 20, 24), (5, 5, 20, 24))
