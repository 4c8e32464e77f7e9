import numpy as np
import pytest
import torch

from rcdet.augment import hflip, mosaic, mosaic_canvas
from rcdet.data import AnnotatedImage


def _item(seed=0, s=32, boxes=((0.3, 0.4, 0.2, 0.3),), classes=(1,)):
    g = torch.Generator().manual_seed(seed)
    return AnnotatedImage(torch.rand(3, s, s, generator=g), boxes, classes, f"img{seed}")


def test_hflip_moves_center_only():
    it = hflip(_item())
    np.testing.assert_allclose(it.boxes, [[0.7, 0.4, 0.2, 0.3]], atol=1e-15)
    assert it.classes.tolist() == [1]


def test_hflip_involution():
    src = _item(boxes=((0.3, 0.4, 0.2, 0.3), (0.91, 0.1, 0.05, 0.2)), classes=(0, 2))
    back = hflip(hflip(src))
    assert torch.equal(back.image, src.image)
    assert back.classes.tolist() == src.classes.tolist()
    assert np.array_equal(back.boxes[:, 1:], src.boxes[:, 1:])
    # 1 - (1 - x) may differ from x in the last binary digit
    np.testing.assert_allclose(back.boxes[:, 0], src.boxes[:, 0], rtol=0, atol=2**-52)


def test_hflip_mirrors_pixels():
    src = _item()
    assert torch.equal(hflip(src).image[:, :, 0], src.image[:, :, -1])


def test_mosaic_center_symmetric_placement():
    items = [_item(i, boxes=((0.5, 0.5, 0.4, 0.4),), classes=(i % 3,)) for i in range(4)]
    out = mosaic(items, center=(32, 32))
    assert out.image.shape == (3, 32, 32)
    expected = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    np.testing.assert_allclose(out.boxes[:, :2], expected, atol=1e-12)
    np.testing.assert_allclose(out.boxes[:, 2:], 0.2, atol=1e-12)
    assert out.classes.tolist() == [0, 1, 2, 0]


@pytest.mark.parametrize("seed", range(10))
def test_mosaic_quadrant_pixels_equal_source_crops(seed):
    s = 24
    items = [_item(seed * 4 + i, s) for i in range(4)]
    rng = np.random.default_rng(seed)
    xc, yc = (int(v) for v in rng.integers(s // 2, 3 * s // 2 + 1, size=2))
    canvas = mosaic_canvas(items, center=(xc, yc)).image
    # top-left tile: the source's bottom-right corner sits at (xc, yc)
    for (img, ox, oy) in ((items[0], xc - s, yc - s), (items[1], xc, yc - s), (items[2], xc - s, yc), (items[3], xc, yc)):
        for y in range(2 * s):
            for x in range(2 * s):
                sx, sy = x - ox, y - oy
                if 0 <= sx < s and 0 <= sy < s and (x < xc) == (ox < xc) and (y < yc) == (oy < yc):
                    assert torch.equal(canvas[:, y, x], img.image[:, sy, sx])
    # uncovered canvas keeps the fill value
    if xc < s and yc < s:
        assert torch.equal(canvas[:, 0, 0], torch.full((3,), 0.5))
    down = mosaic(items, center=(xc, yc)).image
    assert torch.allclose(down, torch.nn.functional.avg_pool2d(canvas[None], 2)[0])


@pytest.mark.parametrize("seed", range(30))
def test_mosaic_boxes_inside_unit_square_and_vocab(seed):
    rng = np.random.default_rng(seed)
    items = []
    for i in range(4):
        n = int(rng.integers(0, 4))
        boxes = np.column_stack([rng.uniform(0, 1, (n, 2)), rng.uniform(0.02, 0.6, (n, 2))])
        items.append(_item(seed * 4 + i, 32, boxes, rng.integers(0, 3, n)))
    out = mosaic(items, rng)
    xyxy = np.column_stack([out.boxes[:, :2] - out.boxes[:, 2:] / 2, out.boxes[:, :2] + out.boxes[:, 2:] / 2])
    assert (xyxy >= -1e-12).all() and (xyxy <= 1 + 1e-12).all()
    assert (out.boxes[:, 2] * out.boxes[:, 3] >= 1e-4 - 1e-15).all()
    assert set(out.classes.tolist()) <= {0, 1, 2}
    assert len(out.boxes) <= sum(len(it.boxes) for it in items)


def test_mosaic_drops_degenerate_boxes():
    # box hugging the left edge of the bottom-right tile gets cropped away when the tile is shifted off-canvas
    items = [_item(i, 32, ((0.02, 0.5, 0.02, 0.02),), (0,)) for i in range(4)]
    out = mosaic(items, center=(60, 60))
    assert len(out.boxes) < 4


def test_mosaic_rejects_wrong_count():
    with pytest.raises(ValueError):
        mosaic([_item()] * 3)
