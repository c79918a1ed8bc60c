import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cnncascade.cascade import (CandidateRegion, DetectorParams, ParamsError, RegionVerdict, RunStats,
                                classify_regions, crop_replicate, decide, detect, equalize_histogram,
                                expanded_box, extract_patch, finalize, group_detections, mirror_horizontal,
                                normalize_pixels, preprocess_patch, scan_stage1, window_count)
from cnncascade.geometry import iou_rect
from cnncascade.nnkernel import response_map
from cnncascade.pyramid import PyramidLevel, resize_bilinear
from cnncascade.synthetic import make_scene


# ---------------------------------------------------------------- params


@pytest.mark.parametrize("kw", [
    {"scale_factor": 1.0}, {"min_size": 0}, {"t1": 1.72}, {"t2": -1.8}, {"tm": 0}, {"tm": 1.5},
    {"min_neighbors": 0}, {"rule": "majority"}, {"mode": "gpu"}, {"group_iou": 0},
])
def test_params_validation(kw):
    with pytest.raises(ParamsError):
        DetectorParams(**kw).validate()


def test_default_params_validate():
    assert DetectorParams().validate().tm == 1


# ---------------------------------------------------------------- decision rule


@pytest.mark.parametrize("k2,k3,tm,rule,expected", [
    (0, 5, 1, "strict", False), (1, 1, 1, "strict", True), (2, 0, 1, "strict", False),
    (2, 1, 2, "strict", True), (1, 2, 2, "strict", True), (1, 1, 2, "strict", False),
    (0, 0, 1, "weak", False), (2, 0, 2, "weak", True), (0, 2, 2, "weak", True), (1, 1, 2, "weak", False),
])
def test_decision_rule_examples(k2, k3, tm, rule, expected):
    assert decide(k2, k3, tm, rule) is expected


def reference_classify(patch, model, t2, tm, rule):
    counts, best = [], []
    for net in (model.cnn2, model.cnn3):
        resp = np.concatenate([response_map(patch, net.spec, net.weights).ravel(),
                               response_map(patch[:, ::-1].copy(), net.spec, net.weights).ravel()])
        counts.append(int((resp > t2).sum()))
        best.append(float(resp.max()))
    return decide(counts[0], counts[1], tm, rule), counts


@pytest.mark.parametrize("rule", ["strict", "weak"])
def test_classify_regions_against_per_patch_oracle(random_model, rng, rule):
    patches = rng.uniform(-1, 1, (6, 55, 51)).astype(np.float32)
    verdicts = classify_regions(patches, random_model.cnn2, random_model.cnn3, 0.0, 2, rule)
    for patch, v in zip(patches, verdicts):
        accepted, (k2, k3) = reference_classify(patch, random_model, 0.0, 2, rule)
        assert v.accepted == accepted
        assert v.k2 == k2
        if v.ran_cnn3:
            assert v.k3 == k3


def test_cnn3_skipped_when_cnn2_finds_nothing(random_model, rng):
    patches = rng.uniform(-1, 1, (3, 55, 51)).astype(np.float32)
    verdicts = classify_regions(patches, random_model.cnn2, random_model.cnn3, 1.7, 1, "strict")
    assert all(v.k2 == 0 and not v.ran_cnn3 and not v.accepted and not v.passed_cnn2 for v in verdicts)


def test_classify_rejects_wrong_patch_size(random_model):
    from cnncascade.nnkernel import DimensionError
    with pytest.raises(DimensionError):
        classify_regions(np.zeros((1, 50, 50)), random_model.cnn2, random_model.cnn3, 0.0, 1)
    assert classify_regions(np.zeros((0, 55, 51)), random_model.cnn2, random_model.cnn3, 0.0, 1) == []


# ---------------------------------------------------------------- preprocessing


def loop_equalize(patch):
    vals = np.clip(np.floor(np.asarray(patch, float) + 0.5), 0, 255).astype(int)
    n = vals.size
    cdf = [0] * 256
    running = 0
    for level in range(256):
        running += int((vals == level).sum())
        cdf[level] = running
    cdf_min = next(c for c in cdf if c > 0)
    if cdf_min == n:
        return vals.astype(float)
    out = np.empty(vals.shape)
    for idx in np.ndindex(vals.shape):
        out[idx] = np.floor(255 * (cdf[vals[idx]] - cdf_min) / (n - cdf_min) + 0.5)
    return out


def test_equalization_matches_loop_oracle(rng):
    patch = rng.normal(100, 20, (12, 10)).clip(0, 255)
    eq = equalize_histogram(patch)
    np.testing.assert_array_equal(eq, loop_equalize(patch))
    assert eq.min() == 0 and eq.max() == 255


def test_equalization_of_flat_patch_is_identity():
    flat = np.full((5, 5), 77.0)
    np.testing.assert_array_equal(equalize_histogram(flat), flat)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_equalization_is_monotone(seed):
    patch = np.random.default_rng(seed).integers(0, 256, (8, 9)).astype(float)
    eq = equalize_histogram(patch)
    order = np.argsort(patch.ravel(), kind="stable")
    assert np.all(np.diff(eq.ravel()[order]) >= 0)


def test_normalize_and_preprocess_range(rng):
    assert normalize_pixels(np.array([0.0, 255.0])).tolist() == [-1.0, 1.0]
    out = preprocess_patch(rng.uniform(0, 255, (55, 51)))
    assert out.dtype == np.float32 and out.min() == -1 and out.max() == 1


def test_crop_replicates_edges():
    img = np.arange(12, dtype=float).reshape(3, 4)
    crop = crop_replicate(img, -1, -1, 6, 5)
    assert crop.shape == (5, 6)
    assert crop[0, 0] == img[0, 0] and crop[-1, -1] == img[-1, -1]
    np.testing.assert_array_equal(crop[1:4, 1:5], img)


def test_expanded_box_is_centred():
    x, y, w, h = expanded_box((10, 20, 35, 39), (51 / 35, 55 / 39))
    assert (w, h) == (51, 55)
    assert abs((x + w / 2) - 27.5) <= 0.5 and abs((y + h / 2) - 39.5) <= 0.5


def test_mirror_flips_last_axis():
    a = np.arange(6).reshape(1, 2, 3)
    np.testing.assert_array_equal(mirror_horizontal(a), a[..., ::-1])


# ---------------------------------------------------------------- stage 1


def test_window_count_matches_response_shape(random_model, rng):
    img = rng.uniform(0, 255, (70, 90)).astype(np.float32)
    level = PyramidLevel(0, 1.0, img)
    cands = scan_stage1(level, random_model.cnn1, -2.0)
    assert len(cands) == window_count(90, 70, (27, 31), 4)
    assert {(c.x % 4, c.y % 4) for c in cands} == {(0, 0)}
    assert window_count(20, 70, (27, 31), 4) == 0


# ---------------------------------------------------------------- grouping


def brute_force_clusters(rects, threshold):
    n = len(rects)
    label = list(range(n))
    changed = True
    while changed:
        changed = False
        for i, j in itertools.combinations(range(n), 2):
            if iou_rect(rects[i], rects[j]) >= threshold and label[i] != label[j]:
                low = min(label[i], label[j])
                label[i] = label[j] = low
                changed = True
    groups = {}
    for i, l in enumerate(label):
        groups.setdefault(l, []).append(i)
    return groups.values()


rect_st = st.tuples(st.integers(0, 60), st.integers(0, 60), st.integers(5, 30), st.integers(5, 30))


@settings(max_examples=100, deadline=None)
@given(st.lists(rect_st, max_size=14), st.sampled_from([0.1, 0.3, 0.5]), st.integers(1, 3))
def test_grouping_matches_brute_force(rects, threshold, min_neighbors):
    raw = [(tuple(float(v) for v in r), float(k)) for k, r in enumerate(rects)]
    got = group_detections(raw, min_neighbors, threshold)
    expected = []
    for members in brute_force_clusters([r for r, _ in raw], threshold):
        if len(members) >= min_neighbors:
            mean = np.mean([raw[i][0] for i in members], axis=0)
            expected.append((tuple(mean), max(raw[i][1] for i in members), len(members)))
    key = lambda t: (t[0], t[1])
    got_t = sorted(((d.rect, d.score, d.neighbors) for d in got), key=key)
    assert len(got_t) == len(expected)
    for g, e in zip(got_t, sorted(expected, key=key)):
        np.testing.assert_allclose(g[0], e[0])
        assert g[1:] == e[1:]


def test_finalize_ignores_input_order():
    cands = [CandidateRegion(0, 0, 0, 1.0), CandidateRegion(0, 4, 0, 1.0), CandidateRegion(1, 40, 40, 1.0)]
    verdicts = [RegionVerdict(True, 2, 2, s, True, True) for s in (0.5, 0.9, 0.7)]
    scales = {0: 1.0, 1: 0.5}
    a = finalize(cands, verdicts, scales, (27, 31), DetectorParams())
    b = finalize(cands[::-1], verdicts[::-1], scales, (27, 31), DetectorParams())
    assert a == b
    assert sorted(d.neighbors for d in a) == [1, 2]


# ---------------------------------------------------------------- end to end


def test_detect_stats_are_monotone(random_model, rng):
    img = rng.integers(0, 256, (90, 110)).astype(np.uint8)
    dets, stats = detect(img, random_model, DetectorParams(min_size=27, scale_factor=1.2))
    assert stats.sliding >= stats.stage1 >= stats.stage2 >= stats.stage3 >= stats.nms == len(dets)
    assert stats.total_s >= stats.scan_s + stats.select_s


def test_detect_on_tiny_image_is_empty(random_model):
    dets, stats = detect(np.zeros((10, 10), np.uint8), random_model, DetectorParams(min_size=27))
    assert dets == [] and stats.counts == (0, 0, 0, 0, 0)


def test_detect_rejects_non_finite(random_model):
    img = np.zeros((40, 40))
    img[3, 3] = np.nan
    with pytest.raises(ValueError):
        detect(img, random_model)


def test_detect_accepts_rgb(random_model, rng):
    rgb = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
    _, stats = detect(rgb, random_model, DetectorParams(min_size=27))
    assert stats.sliding > 0


def test_rejection_percentages():
    stats = RunStats(sliding=1000, stage1=10, stage2=5, stage3=5, nms=2)
    rej = stats.rejected_pct()
    assert rej["stage1"] == pytest.approx(99.0)
    assert rej["stage2"] == pytest.approx(50.0)
    assert rej["stage3"] == 0.0
    assert stats.table_row("x")[:6] == ["x", 1000, 10, 5, 5, 2]


def test_toy_model_finds_planted_faces(toy_model):
    found = total = 0
    for seed in range(6):
        scene = make_scene(200, 160, 2, (28, 50), seed=100 + seed)
        dets, _ = detect(scene.image, toy_model, DetectorParams(min_size=20, scale_factor=1.1))
        for box in scene.boxes:
            total += 1
            found += any(iou_rect(box, d.rect) >= 0.5 for d in dets)
    assert found / total >= 0.9


def test_blank_frame_has_no_detections(toy_model):
    dets, stats = detect(np.full((120, 160), 128, np.uint8), toy_model)
    assert dets == [] and stats.sliding > 0
    assert stats.rejected_pct()["stage1"] == pytest.approx(100.0)


# ---------------------------------------------------------------- worked examples


def test_window_sized_level_gives_at_most_origin(random_model, rng):
    level = PyramidLevel(0, 1.0, rng.uniform(0, 255, (31, 27)).astype(np.float32))
    cands = scan_stage1(level, random_model.cnn1, -1.7159)
    assert [(c.x, c.y) for c in cands] == [(0, 0)]


def test_lowest_threshold_emits_every_window(random_model, rng):
    level = PyramidLevel(0, 1.0, rng.uniform(0, 255, (67, 58)).astype(np.float32))
    cands = scan_stage1(level, random_model.cnn1, -1.7159)
    assert len(cands) == ((58 - 27) // 4 + 1) * ((67 - 31) // 4 + 1)


def test_patch_shapes_and_constant_patch(rng):
    img = rng.uniform(0, 255, (120, 140))
    assert extract_patch(img, CandidateRegion(0, 50, 40, 1.0), 1.0).shape == (55, 51)
    const = extract_patch(np.full((80, 80), 42.0), CandidateRegion(0, 20, 20, 1.0), 1.0)
    assert const.shape == (55, 51) and np.all(const == 42)


def test_corner_patch_matches_padded_oracle(rng):
    img = rng.uniform(0, 255, (60, 70)).astype(np.float32)
    patch = extract_patch(img, CandidateRegion(0, 0, 0, 1.0), 1.0)
    x, y, w, h = expanded_box((0, 0, 27, 31), (51 / 35, 55 / 39))
    assert x < 0 and y < 0
    pad = 40
    padded = np.pad(img, pad, mode="edge")
    crop = padded[y + pad:y + pad + h, x + pad:x + pad + w]
    np.testing.assert_array_equal(patch, resize_bilinear(crop, 51, 55))


def test_equalization_examples():
    ramp = np.tile(np.arange(256.0), (4, 1))
    np.testing.assert_array_equal(equalize_histogram(ramp), ramp)
    two = np.array([[10.0, 200.0], [200.0, 10.0]])
    assert set(np.unique(equalize_histogram(two))) == {0.0, 255.0}


def test_mirror_examples(rng):
    p = rng.uniform(size=(55, 51))
    np.testing.assert_array_equal(mirror_horizontal(mirror_horizontal(p)), p)
    sym = np.hstack([p[:, :25], p[:, 25:26], p[:, :25][:, ::-1]])
    np.testing.assert_array_equal(mirror_horizontal(sym), sym)
    m = mirror_horizontal(p)
    assert m[7, 3] == p[7, 51 - 1 - 3]


def test_grouping_examples():
    assert group_detections([], 1) == []
    cluster = [((0.0, 0.0, 10.0, 10.0), 0.1), ((1.0, 0.0, 10.0, 10.0), 0.3), ((0.0, 1.0, 10.0, 10.0), 0.2)]
    lone = ((100.0, 100.0, 10.0, 10.0), 0.9)
    out = group_detections(cluster + [lone], 2)
    assert len(out) == 1 and out[0].neighbors == 3
    np.testing.assert_allclose(out[0].rect, (1 / 3, 1 / 3, 10, 10))
    disjoint = [((20.0 * k, 0.0, 10.0, 10.0), float(k)) for k in range(4)]
    assert sorted(d.rect for d in group_detections(disjoint, 1)) == [r for r, _ in disjoint]
