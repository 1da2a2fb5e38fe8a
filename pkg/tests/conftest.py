import numpy as np
import pytest
import torch

from sdfrecon import field as field_mod
from sdfrecon import scene as scene_mod
from sdfrecon import synth


def pytest_configure(config):
    torch.set_num_threads(min(2, torch.get_num_threads()))


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_scene():
    return synth.default_scene()


@pytest.fixture(scope="session")
def default_rig():
    return synth.RigSpec(count=16, image_size=96, focal=104.0, altitude=4.0, spread=0.9)


@pytest.fixture()
def tiny_field():
    """Small single-precision field for fast unit tests."""
    cfg = field_mod.FieldConfig(
        n_levels=4,
        base_resolution=16,
        leaf_size=2.0 / 64.0,
        table_size_log2=15,
        geo_hidden=32,
        geo_feature_dim=7,
        app_hidden=32,
    )
    return field_mod.SdfField(cfg, seed=11)


@pytest.fixture()
def gradcheck_field():
    """Reduced double-precision field for finite-difference checks."""
    cfg = field_mod.FieldConfig(
        n_levels=4,
        base_resolution=8,
        leaf_size=2.0 / 32.0,
        table_size_log2=15,
        geo_hidden=16,
        geo_layers=2,
        geo_feature_dim=6,
        app_hidden=16,
        app_layers=2,
        dtype="float64",
    )
    return field_mod.SdfField(cfg, seed=5)


def make_simple_camera(cam_id=0, width=64, height=64, focal=80.0, center=(0.0, 0.0, 4.0),
                       rotation=None, gsd=0.05):
    if rotation is None:
        rotation = synth.NADIR_ROTATION
    return scene_mod.CameraView(
        id=cam_id,
        width=width,
        height=height,
        focal=focal,
        principal_point=np.array([(width - 1) / 2.0, (height - 1) / 2.0]),
        rotation=np.asarray(rotation, dtype=np.float64),
        center=np.asarray(center, dtype=np.float64),
        gsd=gsd,
    )


@pytest.fixture()
def nadir_camera():
    return make_simple_camera()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, default_scene):
    """A small rendered dataset shared by trainer/CLI tests."""
    out = tmp_path_factory.mktemp("smallds")
    rig = synth.RigSpec(count=9, image_size=48, focal=52.0, altitude=4.0, spread=0.9)
    synth.write_dataset(
        out, default_scene, rig, {"count": 400, "pixel_noise": 0.0, "outlier_rate": 0.0}, seed=5
    )
    return out
