import json
import logging

import numpy as np
import pytest

from proxyid import numerics
from proxyid.errors import UserError
from proxyid.preprocess import GRAY, MODES, blur_background, crop_pill, extract_single_pills, write_single_pills
from proxyid.synthgen import PillClass, PillInstance, VialScene, compose_vial_scene, make_vial_template


def scene_with(size=(8, 8), seed=0):
    cls = PillClass(0, "t", "round", (230, 60, 60), size, "", ".")
    return compose_vial_scene(cls, make_vial_template(0), numerics.make_rng(seed))


def flat_scene(value=90):
    image = np.full((80, 80, 3), value, dtype=np.uint8)
    mask = np.zeros((80, 80), dtype=bool)
    mask[30:46, 20:50] = True
    image[mask] = (250, 10, 10)
    return VialScene(image, [PillInstance(3, mask, mask, (38, 35), 0.0, "front")], 0, "flat")


def test_gray_background_is_exact():
    for seed in range(3):
        for p in extract_single_pills(scene_with((20, 26), seed), "gray", 48):
            assert np.all(p.raster[~p.mask] == GRAY)


def test_ten_pills_give_ten_crops():
    scene = scene_with()
    assert len(scene.pills) == 10
    assert len(extract_single_pills(scene, "bbox")) == 10


def test_blur_keeps_constant_background():
    p = extract_single_pills(flat_scene(), "blurred", 32)[0]
    assert np.all(p.raster[~p.mask] == 90)


def test_blur_of_constant_image_is_identity():
    raster = np.full((20, 20, 3), 77, dtype=np.uint8)
    mask = np.zeros((20, 20), dtype=bool)
    assert np.array_equal(blur_background(raster, mask), raster)


def test_foreground_identical_across_modes():
    scene = scene_with((22, 30), 4)
    crops = {m: extract_single_pills(scene, m, 40) for m in MODES}
    for a, b, c in zip(*crops.values()):
        assert np.array_equal(a.mask, b.mask) and np.array_equal(a.mask, c.mask)
        assert np.array_equal(a.raster[a.mask], b.raster[b.mask])
        assert np.array_equal(a.raster[a.mask], c.raster[c.mask])


def test_crop_is_square_and_centered():
    for p in extract_single_pills(scene_with((18, 34), 2), "bbox", 50):
        assert p.raster.shape == (50, 50, 3)
        ys, xs = np.nonzero(p.mask)
        assert abs(ys.mean() - 24.5) <= 50 / 4 and abs(xs.mean() - 24.5) <= 50 / 4


def test_crop_near_border_zero_fills():
    image = np.full((10, 10, 3), 200, dtype=np.uint8)
    mask = np.zeros((10, 10), dtype=bool)
    mask[0:2, 0:6] = True
    raster, small = crop_pill(image, mask, "bbox", 6)
    assert raster.shape == (6, 6, 3) and small.any()
    assert raster[0].max() == 0


def test_empty_mask_is_skipped_with_record(caplog):
    scene = flat_scene()
    hidden = PillInstance(3, np.zeros((80, 80), dtype=bool), scene.pills[0].footprint, (0, 0), 0.0, "back")
    scene.pills.insert(0, hidden)
    skipped = []
    with caplog.at_level(logging.WARNING):
        out = extract_single_pills(scene, "gray", 16, skipped)
    assert len(out) == 1 and out[0].pill_index == 1
    assert skipped == [{"scene_id": "flat", "pill_index": 0, "reason": "empty mask"}]
    assert "empty mask" in caplog.text


def test_errors():
    with pytest.raises(UserError):
        extract_single_pills(VialScene(np.zeros((4, 4, 3), np.uint8), [], 0), "gray")
    with pytest.raises(UserError):
        extract_single_pills(flat_scene(), "sepia")


def test_write_sidecar(tmp_path):
    pills = extract_single_pills(flat_scene(), "gray", 16)
    sidecar = write_single_pills(tmp_path, "flat", pills, light=2)
    folder = tmp_path / "flat"
    assert json.loads((folder / "flat_l2.json").read_text()) == sidecar
    name = sidecar["pills"][0]["file"]
    assert name == "flat_l2_pill00_gray.ppm" and sidecar["pills"][0]["label"] == 3
    assert (folder / name).read_bytes()[:2] == b"P6"
