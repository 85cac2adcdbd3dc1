import numpy as np
import pytest

from cephreg.dataset import (AnnotationError, CephDataset, CephItem, PreprocessSpec, SynthStyle, load_isbi,
                             parse_annotation, patch_origin, preprocess, resize_area, sample_patch, scale_item,
                             scaled_size, stage_targets, synth_generate, synth_item, write_annotation,
                             write_dataset, write_image)
from cephreg.heatmap import Frame, FrameError, LandmarkSet, rescale_landmarks


def item(pts, h=40, w=30, frame=Frame.RAW, name="senior", item_id="001"):
    return CephItem(item_id, np.zeros((h, w), np.float32), {name: LandmarkSet(pts, frame)}, frame)


def test_parse_annotation(tmp_path):
    f = tmp_path / "001.txt"
    f.write_text("1234,987\n5.5,6.25\nextra lines are ignored\n")
    s = parse_annotation(f, 2)
    assert s.points.tolist() == [[1234, 987], [5.5, 6.25]] and s.frame == Frame.RAW


def test_parse_annotation_errors(tmp_path):
    f = tmp_path / "002.txt"
    f.write_text("1,2\n3;4\n")
    with pytest.raises(AnnotationError, match=r"002.txt:2"):
        parse_annotation(f, 2)
    f.write_text("1,2\n")
    with pytest.raises(AnnotationError, match="1 coordinate lines"):
        parse_annotation(f, 2)


def test_annotation_roundtrip_with_invalid(tmp_path):
    s = LandmarkSet([[1.25, 2.5], [3, 4]], Frame.RAW, valid=[True, False])
    write_annotation(tmp_path / "a.txt", s)
    back = parse_annotation(tmp_path / "a.txt", 2)
    assert back.points[0].tolist() == [1.25, 2.5] and back.valid.tolist() == [True, False]


def test_average_ground_truth_commutative():
    it = CephItem("1", np.zeros((4, 4), np.float32),
                  {"senior": LandmarkSet([[100, 200]], Frame.RAW), "junior": LandmarkSet([[110, 210]], Frame.RAW)})
    assert it.ground_truth().points.tolist() == [[105, 205]]
    swapped = CephItem("1", it.image, dict(reversed(list(it.annotations.items()))))
    assert np.array_equal(swapped.ground_truth().points, it.ground_truth().points)
    assert it.ground_truth("senior").points.tolist() == [[100, 200]]
    with pytest.raises(KeyError):
        it.ground_truth("nobody")


def _write_isbi(root, n_items=3, skip_junior=()):
    rng = np.random.default_rng(0)
    (root / "RawImage" / "TrainingData").mkdir(parents=True)
    for name in ("400_senior", "400_junior"):
        (root / "AnnotationsByMD" / name).mkdir(parents=True)
    for n in (1, 151, 301)[:n_items]:
        iid = f"{n:03d}"
        write_image(root / "RawImage" / "TrainingData" / f"{iid}.png", rng.uniform(size=(12, 10)))
        for name in ("400_senior", "400_junior"):
            if name == "400_junior" and iid in skip_junior:
                continue
            pts = rng.uniform(0, 9, (19, 2))
            (root / "AnnotationsByMD" / name / f"{iid}.txt").write_text(
                "\n".join(f"{int(x)},{int(y)}" for x, y in pts) + "\n")


def test_load_isbi_layout_and_splits(tmp_path):
    _write_isbi(tmp_path)
    ds = load_isbi(tmp_path)
    assert [it.id for it in ds.items] == ["001", "151", "301"]
    assert [it.split for it in ds.items] == ["train", "test1", "test2"]
    assert ds.pixel_spacing == 0.1 and set(ds.items[0].annotations) == {"senior", "junior"}


def test_load_isbi_custom_annotator_names(tmp_path):
    _write_isbi(tmp_path, 1)
    ds = load_isbi(tmp_path, {"senior": "400_senior"})
    assert set(ds.items[0].annotations) == {"senior"}
    with pytest.raises(FileNotFoundError):
        load_isbi(tmp_path, {"x": "missing_dir"})


def test_load_isbi_rejects_unannotated(tmp_path):
    _write_isbi(tmp_path, 2)
    for d in ("400_senior", "400_junior"):
        (tmp_path / "AnnotationsByMD" / d / "151.txt").unlink()
    ds = load_isbi(tmp_path)
    assert [it.id for it in ds.items] == ["001"] and ds.rejected == ["151"]


def test_write_dataset_roundtrip(tmp_path):
    ds = synth_generate(1, 4, canvas=128, num_landmarks=3)
    write_dataset(ds, tmp_path / "d")
    back = load_isbi(tmp_path / "d")
    assert [it.id for it in back.items] == [it.id for it in ds.items]
    assert back.pixel_spacing == 1.0 and back.num_landmarks == 3
    for a, b in zip(ds.items, back.items):
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
        assert np.allclose(a.ground_truth().points, b.ground_truth().points, atol=5e-5)


def test_dataset_invariants():
    a = item([[1, 2]])
    with pytest.raises(ValueError, match="resolution"):
        CephDataset([a, item([[1, 2]], h=41)], num_landmarks=1)
    with pytest.raises(ValueError, match="landmarks"):
        CephDataset([a], num_landmarks=2)


def test_preprocess_crop():
    it = CephItem("1", np.arange(2400 * 1935, dtype=np.float32).reshape(2400, 1935),
                  {"s": LandmarkSet([[1000, 1465], [1000, 400]], Frame.RAW)})
    out = preprocess(it)
    assert out.image.shape == (1935, 1935) and out.frame == Frame.ORIGINAL
    assert out.image[0, 0] == it.image[465, 0]
    s = out.annotations["s"]
    assert s.points.tolist() == [[1000, 1000], [1000, -65]]
    assert s.valid.tolist() == [True, False] and out.out_of_crop.tolist() == [False, True]
    with pytest.raises(FrameError):
        preprocess(out)
    with pytest.raises(ValueError, match="square"):
        preprocess(item([[1, 1]], 40, 30), PreprocessSpec(crop_top=5))


def test_scaled_sizes():
    assert scaled_size(1935, 0.15) == 290
    assert scaled_size(1935, 0.5) == 968


def test_scale_item_constant_and_frames():
    it = CephItem("1", np.full((20, 20), 0.3, np.float32), {"s": LandmarkSet([[10, 4]], Frame.ORIGINAL)},
                  Frame.ORIGINAL)
    out = scale_item(it, 0.15, Frame.GLOBAL)
    assert out.image.shape == (3, 3) and np.allclose(out.image, 0.3, atol=1e-6)
    assert np.allclose(out.annotations["s"].points, [[1.5, 0.6]])
    with pytest.raises(FrameError):
        scale_item(out, 0.5, Frame.LOCAL)


def _resize_loop(img, f):
    """Output pixel j sits at input coordinate j / f and averages its box by overlap length."""
    def weights(n_in):
        n_out = int(np.floor(n_in * f + 0.5))
        rows = []
        for j in range(n_out):
            lo, hi = (j - 0.5) / f, (j + 0.5) / f
            w = [max(0.0, min(hi, i + 0.5) - max(lo, i - 0.5)) for i in range(n_in)]
            rows.append([v / sum(w) for v in w])
        return rows
    wy, wx = weights(img.shape[0]), weights(img.shape[1])
    out = np.zeros((len(wy), len(wx)))
    for a, ry in enumerate(wy):
        for b, rx in enumerate(wx):
            out[a, b] = sum(ry[i] * rx[k] * img[i, k] for i in range(img.shape[0]) for k in range(img.shape[1]))
    return out


@pytest.mark.parametrize("f", [0.25, 0.15, 0.5, 0.37])
def test_resize_area_matches_overlap_loop(f):
    img = np.random.default_rng(2).uniform(size=(23, 17))
    got = resize_area(img, f)
    assert np.max(np.abs(got - _resize_loop(img, f))) < 1e-12


def test_frame_roundtrip_through_scaling():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 1900, (19, 2)) + [0, 465]
    it = CephItem("1", np.zeros((2400, 1935), np.float32), {"s": LandmarkSet(pts, Frame.RAW)})
    orig = preprocess(it).annotations["s"]
    g = rescale_landmarks(orig, 0.15, Frame.GLOBAL)
    back = rescale_landmarks(g, 1 / 0.15, Frame.ORIGINAL).points + [0, 465]
    assert np.max(np.abs(back - pts)) < 1e-9


def test_patch_contains_anchor_and_is_deterministic():
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(60, 70))
    tgt = rng.uniform(size=(3, 60, 70))
    lms = LandmarkSet([[1, 1], [35, 30], [69, 59]], Frame.LOCAL)
    for _ in range(500):
        ip, tp, a, (x0, y0) = sample_patch(img, tgt, lms, 20, rng)
        x, y = np.rint(lms.points[a]).astype(int)
        assert ip.shape == (20, 20) and tp.shape == (3, 20, 20)
        assert x0 <= x < x0 + 20 and y0 <= y < y0 + 20
        if a == 1:
            assert x0 < x < x0 + 19 and y0 < y < y0 + 19
        assert np.array_equal(tp, tgt[:, y0:y0 + 20, x0:x0 + 20])
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    a, b = sample_patch(img, tgt, lms, 20, r1), sample_patch(img, tgt, lms, 20, r2)
    assert np.array_equal(a[0], b[0]) and a[2:] == b[2:]


def test_patch_offsets_uniform_chi_square():
    from scipy.stats import chi2

    rng = np.random.default_rng(5)
    anchor, p = (100, 100), 50
    # valid top-left range: [a - p + 2, a - 1] = [52, 99], 48 values per axis
    counts = np.zeros((10, 10))
    lo, n = 52, 48
    for _ in range(10_000):
        x0, y0 = patch_origin(anchor, p, 300, 300, rng)
        assert lo <= x0 < lo + n and lo <= y0 < lo + n
        counts[(x0 - lo) * 10 // n, (y0 - lo) * 10 // n] += 1
    widths = np.bincount(np.arange(n) * 10 // n, minlength=10)
    expected = np.outer(widths, widths) / n ** 2 * 10_000
    stat = ((counts - expected) ** 2 / expected).sum()
    assert stat < chi2.ppf(0.99, 99)


def test_anchor_frequencies_binomial():
    rng = np.random.default_rng(6)
    lms = LandmarkSet(rng.uniform(20, 80, (19, 2)), Frame.LOCAL)
    img, tgt = np.zeros((100, 100)), np.zeros((20, 100, 100))
    counts = np.zeros(19, int)
    for _ in range(10_000):
        counts[sample_patch(img, tgt, lms, 30, rng)[2]] += 1
    assert counts.min() >= 400 and counts.max() <= 650


def test_synth_deterministic_and_valid():
    a, b = synth_generate(7, 6, canvas=128, num_landmarks=5), synth_generate(7, 6, canvas=128, num_landmarks=5)
    for x, y in zip(a.items, b.items):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.ground_truth().points, y.ground_truth().points)
    assert [it.split for it in a.items].count("test") == 2
    for it in a.items:
        p = it.ground_truth().points
        assert np.all(p >= 0) and np.all(p <= 127)
        d = np.hypot(*(p[:, None] - p[None]).transpose(2, 0, 1)) + np.eye(5) * 1e9
        assert d.min() > 0.08 * 128
    with pytest.raises(ValueError):
        synth_generate(0, 2, canvas=64)


def test_synth_landmark0_is_ellipse_top():
    rng = np.random.default_rng(8)
    for _ in range(5):
        img, pts = synth_item(rng, 256, 5, SynthStyle(noise=0.0, distractors=0))
        x, y = pts[0]
        col = img[:, int(round(x))].astype(np.float64)
        y_out, y_in = int(y) - 6, int(y) + 6
        half = 0.5 * (col[y_out] + col[y_in])
        # first downward crossing of the half-intensity level
        for r in range(y_out, y_in):
            if col[r] <= half < col[r + 1]:
                edge = r + (half - col[r]) / (col[r + 1] - col[r])
                break
        assert abs(edge - y) <= 0.5


def test_stage_targets_shape():
    ds = synth_generate(0, 1, canvas=128, num_landmarks=3)
    it = scale_item(preprocess(ds.items[0], PreprocessSpec(0, 0.25, 0.5)), 0.25, Frame.GLOBAL)
    t = stage_targets(it, 8)
    assert t.shape == (4, 32, 32) and t.dtype == np.float32
