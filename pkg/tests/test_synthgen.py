import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxyid import numerics
from proxyid.errors import SceneGenerationError, UserError
from proxyid.synthgen import (
    LIGHT_COUNT,
    DatasetConfig,
    PillClass,
    PillSpriteSpec,
    PillTooLargeError,
    VialScene,
    central_location_radius,
    compose_vial_scene,
    generate_dataset,
    generate_scene,
    load_scene,
    make_pill_sprite,
    make_vial_template,
    render_light_conditions,
)


def pill(label=0, shape="round", size=(24, 24), front="A1", back=""):
    return PillClass(label, f"p{label}", shape, (200, 200, 200), size, front, back)


def test_radius_examples():
    assert central_location_radius(100, 30, 40) == 50
    assert central_location_radius(100, 0, 0) == 100
    with pytest.raises(PillTooLargeError):
        central_location_radius(50, 30, 40)


@settings(max_examples=100, deadline=None)
@given(st.floats(50, 500), st.floats(1, 30), st.floats(1, 30), st.floats(0.1, 5))
def test_radius_strictly_decreases_with_size(r_vrm, s_r, s_c, grow):
    base = central_location_radius(r_vrm, s_r, s_c)
    assert central_location_radius(r_vrm, s_r + grow, s_c) < base
    assert central_location_radius(r_vrm, s_r, s_c + grow) < base
    assert 0 < base < r_vrm


def test_sprite_deterministic_for_seed():
    spec = PillSpriteSpec("round", (255, 255, 255), "A1", "front", (30, 30))
    a = make_pill_sprite(spec, numerics.make_rng(4))
    b = make_pill_sprite(spec, numerics.make_rng(4))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_front_and_back_share_silhouette():
    front = PillSpriteSpec("oval", (200, 100, 50), "A1", "front", (24, 36))
    back = PillSpriteSpec("oval", (200, 100, 50), "", "back", (24, 36))
    _, m1 = make_pill_sprite(front, numerics.make_rng(0))
    _, m2 = make_pill_sprite(back, numerics.make_rng(1))
    assert np.array_equal(m1, m2)


def test_imprint_changes_pixels():
    plain = PillSpriteSpec("round", (200, 200, 200), "", "front", (30, 30))
    marked = PillSpriteSpec("round", (200, 200, 200), "A1", "front", (30, 30))
    a, _ = make_pill_sprite(plain, numerics.make_rng(0))
    b, _ = make_pill_sprite(marked, numerics.make_rng(0))
    assert np.abs(a.astype(int) - b.astype(int)).max() > 100


def test_capsule_area_ratio():
    _, mask = make_pill_sprite(PillSpriteSpec("capsule", (200, 60, 60), "", "front", (16, 40)), numerics.make_rng(0))
    assert 0.6 * 16 * 40 <= mask.sum() <= 0.85 * 16 * 40


def test_sprite_spec_validation():
    with pytest.raises(UserError):
        PillSpriteSpec("square", (0, 0, 0), "", "front", (20, 20))
    with pytest.raises(UserError):
        PillSpriteSpec("round", (0, 0, 0), "", "front", (7, 20))
    with pytest.raises(UserError):
        PillSpriteSpec("round", (0, 0, 300), "", "front", (20, 20))
    with pytest.raises(UserError):
        PillSpriteSpec("round", (0, 0, 0), "", "top", (20, 20))
    with pytest.raises(SceneGenerationError):
        make_pill_sprite(PillSpriteSpec("round", (0, 0, 0), "WWWWWW", "front", (10, 10)), numerics.make_rng(0))


def test_class_sides_must_differ():
    with pytest.raises(UserError):
        pill(front="X", back="X")
    cls = pill(front="X", back="Y")
    assert PillClass.from_dict(json.loads(json.dumps(cls.to_dict()))) == cls


def test_tiny_pill_fills_ten_slots():
    scene = compose_vial_scene(pill(size=(8, 8), front="", back="."), make_vial_template(0), numerics.make_rng(0))
    assert len(scene.pills) == 10


def test_huge_pill_stops_after_one():
    scene = compose_vial_scene(pill(size=(70, 70), front="A"), make_vial_template(0), numerics.make_rng(0))
    assert len(scene.pills) == 1


def test_no_free_center_is_an_error():
    template = make_vial_template(0)
    # radius about 0.2 px around a half-pixel center: no pixel center inside
    with pytest.raises(SceneGenerationError, match="no free center"):
        compose_vial_scene(pill(size=(80, 79), front="A"), template, numerics.make_rng(0))
    with pytest.raises(UserError):
        compose_vial_scene(pill(), template, numerics.make_rng(0), max_pills=0)
    with pytest.raises(PillTooLargeError):
        compose_vial_scene(pill(size=(90, 90), front="A"), template, numerics.make_rng(0))


@pytest.mark.parametrize("seed", range(6))
def test_scene_invariants(seed):
    template = make_vial_template(seed % 3, seed=seed)
    scene = compose_vial_scene(pill(size=(22, 34), shape="capsule"), template, numerics.make_rng(seed))
    assert 1 <= len(scene.pills) <= 10
    assert len({p.label for p in scene.pills}) == 1
    for j, p in enumerate(scene.pills):
        assert not (p.footprint & ~template.valid_region).any()
        assert (p.mask & ~p.footprint).sum() == 0
        for earlier in scene.pills[:j]:
            # each new center was drawn from the area left free by earlier pills
            assert not earlier.footprint[p.center]
            assert not (earlier.mask & p.footprint).any()


def test_scene_bit_identical_for_same_seed():
    template = make_vial_template(1)
    a = compose_vial_scene(pill(), template, numerics.make_rng(9))
    b = compose_vial_scene(pill(), template, numerics.make_rng(9))
    assert np.array_equal(a.image, b.image)
    assert [p.center for p in a.pills] == [p.center for p in b.pills]


def test_lights_on_uniform_scene():
    gray = np.full((64, 64, 3), 120, dtype=np.uint8)
    rasters = render_light_conditions(VialScene(gray, [], 0))
    assert len(rasters) == LIGHT_COUNT
    assert all(r.shape == gray.shape for r in rasters)
    assert np.array_equal(rasters[0], gray)
    assert np.array_equal(rasters[1], rasters[4][:, ::-1])
    assert rasters[1].min() < 120 < rasters[1].max()


def test_lights_reject_non_square():
    with pytest.raises(UserError):
        render_light_conditions(VialScene(np.zeros((4, 5, 3), dtype=np.uint8), [], 0))


def small_config(**kw):
    classes = [pill(0, "round", (20, 20), "A", ""), pill(1, "oval", (18, 28), "", "B")]
    return DatasetConfig(classes, seed=kw.pop("seed", 3), scene_size=96, poses=3, templates=2, train_poses=2, **kw)


def test_dataset_layout_and_round_trip(tmp_path):
    manifest = generate_dataset(small_config(), tmp_path)
    assert len(manifest["scenes"]) == 6
    entry = manifest["scenes"][0]
    assert entry["split"] == "train" and manifest["scenes"][2]["split"] == "test"
    assert (tmp_path / entry["light_files"][0]).read_bytes()[:2] == b"P6"
    assert (tmp_path / entry["mask_file"]).read_bytes()[:2] == b"P5"
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    scenes = load_scene(tmp_path, entry)
    assert len(scenes) == 7
    assert len(scenes[0].pills) == len(entry["pills"])
    for p, meta in zip(scenes[0].pills, entry["pills"]):
        assert p.mask.sum() == meta["visible_pixels"]


def test_dataset_regenerates_identically_in_any_order(tmp_path):
    cfg = small_config()
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()
    templates = [make_vial_template(t, cfg.scene_size, cfg.seed) for t in range(cfg.templates)]
    late_first = generate_scene(cfg, 1, 2, templates)
    generate_scene(cfg, 0, 0, templates)
    again = generate_scene(cfg, 1, 2, templates)
    assert np.array_equal(late_first.image, again.image)


def test_dataset_config_validation():
    with pytest.raises(UserError):
        DatasetConfig([], seed=0).validate()
    with pytest.raises(UserError):
        small_config(max_pills=0).validate()
    with pytest.raises(UserError):
        DatasetConfig([pill(0), pill(0)]).validate()
