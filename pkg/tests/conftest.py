"""
Shared pytest fixtures
公共 fixture：canonical 相机、toy rig、小网格、fixture 文件路径
"""
import sys
from pathlib import Path

import pytest

# 添加项目根目录到 Python 路径
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from eaformer.services.field_service import field_service  # noqa: E402
from eaformer.services.rig_service import rig_service  # noqa: E402
from eaformer.utils.geometry import BevGrid, canonical_camera  # noqa: E402

FIXTURES = project_root / "fixtures"
RIGS = FIXTURES / "rigs"
CONFIGS = FIXTURES / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="slow: pass --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _fresh_field_cache():
    field_service.clear()
    yield
    field_service.clear()


@pytest.fixture
def canonical():
    return canonical_camera()


@pytest.fixture
def toy_views():
    return rig_service.toy_rig((128, 64))


@pytest.fixture
def toy_grid():
    return BevGrid.parse("16x16@0.5")


@pytest.fixture
def rigs_dir() -> Path:
    return RIGS


@pytest.fixture
def configs_dir() -> Path:
    return CONFIGS
