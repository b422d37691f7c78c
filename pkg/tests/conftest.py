import json

import pytest

from proxyid.config import from_dict, load_config
from proxyid.pipeline import load_crops
from proxyid.synthgen import generate_dataset


def tiny_config_dict() -> dict:
    """The bundled classes at toy scale: runs in seconds, exercises every code path."""
    cfg = load_config().to_dict()
    cfg.update(
        classes=cfg["classes"][:4],
        scene_size=128,
        poses=3,
        train_poses=2,
        templates=2,
        crop_side=16,
        dim=8,
        hidden=16,
        epochs=3,
        proxy_steps=300,
        proxy_restarts=1,
    )
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg():
    return from_dict(tiny_config_dict())


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict()))
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("data")
    manifest = generate_dataset(tiny_cfg.dataset_config(), root)
    crops = load_crops(root, manifest, tiny_cfg.background, tiny_cfg.crop_side)
    return root, manifest, crops
