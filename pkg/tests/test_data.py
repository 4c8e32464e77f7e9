import hashlib
import logging

import numpy as np
import pytest
import torch

from rcdet.data import (
    AnnotatedImage,
    LabelError,
    load_dataset,
    parse_label_lines,
    read_split,
    render_sample,
    save_sample,
    split_dataset,
    synth_generate,
)


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_label_line_format():
    boxes, classes = parse_label_lines(["2 0.5 0.5 0.1 0.3"])
    assert classes.tolist() == [2]
    assert boxes.tolist() == [[0.5, 0.5, 0.1, 0.3]]


def test_malformed_lines_skipped_with_location(caplog):
    issues = []
    lines = ["0 0.5 0.5 0.1", "x 0.1 0.1 0.1 0.1", "1 0.5 0.5 0 0.2", "1 nan 0.5 0.1 0.1", "1 0.4 0.4 0.2 0.2"]
    with caplog.at_level(logging.WARNING):
        boxes, classes = parse_label_lines(lines, where="f.txt", issues=issues)
    assert classes.tolist() == [1]
    assert [i.split(":")[1] for i in issues] == ["1", "2", "3", "4"]
    assert all(i.startswith("f.txt:") for i in issues)


def test_out_of_range_class_is_hard_error():
    with pytest.raises(LabelError, match="f.txt:2"):
        parse_label_lines(["0 0.5 0.5 0.1 0.1", "3 0.5 0.5 0.1 0.1"], where="f.txt")


def test_load_without_labels_and_bad_image(tmp_path):
    item = AnnotatedImage(torch.rand(3, 16, 16), [[0.5, 0.5, 0.25, 0.5]], [1], "a")
    save_sample(tmp_path, item)
    (tmp_path / "labels" / "a.txt").unlink()
    (tmp_path / "images" / "broken.png").write_bytes(b"not a png")
    issues = []
    ds = load_dataset(tmp_path, issues=issues)
    assert [d.source_id for d in ds] == ["a"]
    assert len(ds[0].boxes) == 0
    assert len(issues) == 1 and "broken.png" in issues[0]


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    boxes = np.column_stack([rng.uniform(0.2, 0.8, (5, 2)), rng.uniform(0.05, 0.3, (5, 2))])
    item = AnnotatedImage(torch.rand(3, 20, 20), boxes, [0, 1, 2, 1, 0], "rt")
    save_sample(tmp_path, item)
    (back,) = load_dataset(tmp_path)
    np.testing.assert_allclose(back.boxes, boxes, atol=5e-7)
    assert back.classes.tolist() == [0, 1, 2, 1, 0]
    assert torch.allclose(back.image, item.image, atol=0.5 / 255 + 1e-6)


def test_split_ratio_and_determinism():
    s = split_dataset(100, seed=3)
    assert (len(s.train), len(s.val), len(s.test)) == (70, 20, 10)
    assert split_dataset(100, seed=3) == s
    with pytest.raises(ValueError):
        split_dataset(9)


@pytest.mark.parametrize("n", range(10, 201))
def test_split_is_partition(n):
    s = split_dataset(n, seed=n)
    allidx = s.train + s.val + s.test
    assert sorted(allidx) == list(range(n))
    for part, frac in ((s.train, 0.7), (s.val, 0.2), (s.test, 0.1)):
        assert abs(len(part) - frac * n) <= 1


def test_rendered_boxes_are_tight():
    rng = np.random.default_rng(11)
    for _ in range(60):
        image, boxes, classes, masks = render_sample(rng)
        assert image.shape == (160, 160, 3) and image.dtype == np.uint8
        for b, m in zip(boxes, masks):
            x1, y1 = round((b[0] - b[2] / 2) * 160), round((b[1] - b[3] / 2) * 160)
            x2, y2 = round((b[0] + b[2] / 2) * 160), round((b[1] + b[3] / 2) * 160)
            inside = np.zeros_like(m)
            inside[y1:y2, x1:x2] = True
            assert not (m & ~inside).any()
            assert m[y1:y2, x1].any() and m[y1:y2, x2 - 1].any() and m[y1, x1:x2].any() and m[y2 - 1, x1:x2].any()


def test_class_histogram_near_uniform(tmp_path):
    synth_generate(300, 5, tmp_path)
    ds = load_dataset(tmp_path)
    counts = np.bincount(np.concatenate([d.classes for d in ds]), minlength=3)
    expected = counts.sum() / 3
    assert (np.abs(counts - expected) <= 0.2 * expected).all()
    assert all(1 <= len(d.boxes) <= 3 for d in ds)


def test_generation_is_deterministic(tmp_path):
    synth_generate(12, 9, tmp_path / "a")
    synth_generate(12, 9, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    split = read_split(tmp_path / "a" / "split.txt")
    assert sum(len(v) for v in split.values()) == 12
