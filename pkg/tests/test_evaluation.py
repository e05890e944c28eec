import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vesselxfer.evaluation import (
    METRICS,
    MetricsReport,
    binarize_prediction,
    confusion,
    emit_comparison_figure,
    evaluate_method,
    metrics_from_confusion,
    summary_table,
)


def brute_confusion(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_confusion_trivial_cases():
    ones = np.ones((4, 4), np.uint8)
    assert confusion(ones, ones) == (16, 0, 0, 0)
    truth = (np.random.default_rng(0).random((4, 4)) > 0.5).astype(np.uint8)
    tp, fp, fn, tn = confusion(1 - truth, truth)
    assert tp == 0 and tn == 0


@pytest.mark.parametrize("seed", range(10))
def test_confusion_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    t = (rng.random((8, 8)) > 0.6).astype(np.uint8)
    c = confusion(p, t)
    assert c == brute_confusion(p, t)
    assert sum(c) == 64


def test_confusion_rejects_bad_input():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 0.5), np.zeros((2, 2)))


@pytest.mark.parametrize(
    "counts, expected",
    [
        ((16, 0, 0, 0), (1.0, 1.0, 1.0, 1.0)),
        ((1, 1, 1, 1), (0.5, 0.5, 0.5, 0.5)),
        ((0, 0, 0, 9), (1.0, 1.0, 1.0, 1.0)),
        ((0, 0, 5, 4), (4 / 9, 0.0, 0.0, 0.0)),
        ((3, 1, 2, 10), (13 / 16, 3 / 4, 3 / 5, 6 / 9)),
    ],
)
def test_metrics_from_confusion(counts, expected):
    np.testing.assert_allclose(metrics_from_confusion(*counts), expected, rtol=0, atol=1e-15)


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        metrics_from_confusion(-1, 0, 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_f1_identity_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = (rng.random((12, 12)) > rng.random()).astype(np.uint8)
    t = (rng.random((12, 12)) > rng.random()).astype(np.uint8)
    acc, prec, rec, dice = metrics_from_confusion(*confusion(p, t))
    for v in (acc, prec, rec, dice):
        assert 0.0 <= v <= 1.0
    if p.any() and t.any() and prec + rec > 0:
        assert abs(dice - 2 * prec * rec / (prec + rec)) < 1e-12
    perm = rng.permutation(p.size)
    assert confusion(p.ravel()[perm], t.ravel()[perm]) == confusion(p, t)


def test_binarize_prediction():
    assert not binarize_prediction(np.full((3, 3), -20.0)).any()
    assert binarize_prediction(np.full((3, 3), 20.0)).all()
    z = np.random.default_rng(1).normal(0, 3, (20, 20))
    np.testing.assert_array_equal(binarize_prediction(z), (z > 0).astype(np.uint8))
    sig = 1 / (1 + np.exp(-z))
    np.testing.assert_array_equal(binarize_prediction(z, 0.8), (sig > 0.8).astype(np.uint8))


def test_perfect_single_image_report():
    truth = (np.random.default_rng(2).random((16, 16)) > 0.7).astype(np.uint8)
    rep = evaluate_method("m", lambda img: truth, [("a", None, truth)])
    for m in METRICS:
        assert rep.aggregate[m] == (1.0, 0.0)


def test_population_std_of_two_images():
    rep = MetricsReport("m", [("a", 1, 1, 1, 0.6), ("b", 1, 1, 1, 0.8)])
    mean, std = rep.aggregate["dice"]
    assert abs(mean - 0.7) < 1e-12 and abs(std - 0.1) < 1e-12


def test_missing_truth_names_item():
    with pytest.raises(ValueError, match="img7"):
        evaluate_method("m", lambda x: x, [("img7", np.zeros((2, 2)), None)])


def test_report_csv_roundtrip_and_recomputable_aggregates(tmp_path):
    rng = np.random.default_rng(3)
    rows = [(f"id{i}", *rng.random(4)) for i in range(7)]
    rep = MetricsReport("scgan", rows, config_hash="abc123")
    rep.save(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text(encoding="utf-8")
    assert text.splitlines()[0] == "method,id,accuracy,precision,recall,dice"
    back = MetricsReport.from_csv(text)
    assert back.method == "scgan" and back.config_hash == "abc123"
    assert back.per_image == rep.per_image
    stored = {r[1]: r for r in (line.split(",") for line in text.splitlines()) if len(r) > 1}
    for k, m in enumerate(METRICS):
        col = np.array([r[k + 1] for r in rows])
        assert abs(float(stored["mean"][k + 2]) - col.mean()) < 1e-12
        assert abs(float(stored["std"][k + 2]) - col.std()) < 1e-12


def test_summary_table_format():
    rep = MetricsReport("frangi", [("a", 0.9, 0.5, 0.5, 0.5)])
    table = summary_table([rep])
    assert table.splitlines()[1] == "frangi,0.900+-0.000,0.500+-0.000,0.500+-0.000,0.500+-0.000"


def _item(rng, methods):
    img = rng.random((40, 40))
    masks = {m: (rng.random((40, 40)) > 0.5).astype(np.uint8) for m in methods}
    return img, masks, (rng.random((40, 40)) > 0.5).astype(np.uint8)


def test_figure_one_item_two_methods(tmp_path):
    rng = np.random.default_rng(4)
    out = emit_comparison_figure([_item(rng, ["frangi", "scgan"])], tmp_path / "f.png", tile=32)
    with Image.open(out) as im:
        im.verify()
    with Image.open(out) as im:
        assert im.size == (4 * 32, 32)


@pytest.mark.parametrize("rows, tile", [(1, 16), (3, 50), (2, 64)])
def test_figure_dimensions(tmp_path, rows, tile):
    rng = np.random.default_rng(5)
    methods = ["scgan", "frangi", "add_unet", "classic_unet"]
    items = [_item(rng, methods) for _ in range(rows)]
    out = emit_comparison_figure(items, tmp_path / "g.png", tile=tile)
    with Image.open(out) as im:
        assert im.size == ((len(methods) + 2) * tile, rows * tile)


def test_figure_column_order(tmp_path):
    size = 8
    img = np.zeros((size, size))
    masks = {
        "scgan": np.ones((size, size), np.uint8),
        "frangi": np.zeros((size, size), np.uint8),
    }
    truth = np.ones((size, size), np.uint8)
    out = emit_comparison_figure([(img, masks, truth)], tmp_path / "o.png", tile=size)
    arr = np.asarray(Image.open(out))
    # original (black), frangi (black), scgan (white), truth (white)
    assert [int(arr[0, c * size]) for c in range(4)] == [0, 0, 255, 255]


def test_figure_requires_items(tmp_path):
    with pytest.raises(ValueError):
        emit_comparison_figure([], tmp_path / "x.png")
