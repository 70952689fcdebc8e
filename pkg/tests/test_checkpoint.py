from collections import OrderedDict

import numpy as np
import pytest

from eaformer.exceptions import CheckpointError
from eaformer.utils.checkpoint import MAGIC, assign_parameters, load_checkpoint, save_checkpoint
from eaformer.utils.tensor import Tensor


@pytest.fixture
def params():
    rng = np.random.default_rng(0)
    return OrderedDict([("a.weight", Tensor(rng.standard_normal((3, 2)))),
                        ("a.bias", Tensor(rng.standard_normal(2))),
                        ("scalar", Tensor(0.5))])


def test_save_and_load(tmp_path, params):
    path = save_checkpoint(tmp_path / "m.ckpt", params, {"d_model": 2})
    assert path.read_bytes().startswith(MAGIC)
    meta, arrays = load_checkpoint(path)
    assert meta == {"d_model": 2}
    assert list(arrays) == list(params)
    for name, p in params.items():
        assert arrays[name].tobytes() == p.data.tobytes()


def test_assign_restores_values(tmp_path, params):
    save_checkpoint(tmp_path / "m.ckpt", params, {})
    _, arrays = load_checkpoint(tmp_path / "m.ckpt")
    fresh = OrderedDict((k, Tensor(np.zeros(v.shape))) for k, v in params.items())
    assign_parameters(fresh, arrays)
    for name in params:
        np.testing.assert_array_equal(fresh[name].data, params[name].data)


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_truncated_data(tmp_path, params):
    path = save_checkpoint(tmp_path / "m.ckpt", params, {})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="scalar"):
        load_checkpoint(path)


def test_shape_mismatch_names_the_parameter(params):
    arrays = {k: v.data.copy() for k, v in params.items()}
    arrays["a.weight"] = np.zeros((2, 3))
    with pytest.raises(CheckpointError, match="a.weight"):
        assign_parameters(params, arrays)


def test_missing_and_unexpected_parameters(params):
    arrays = {k: v.data.copy() for k, v in params.items()}
    with pytest.raises(CheckpointError, match="missing parameter 'a.bias'"):
        assign_parameters(params, {k: v for k, v in arrays.items() if k != "a.bias"})
    with pytest.raises(CheckpointError, match="unexpected parameter 'extra'"):
        assign_parameters(params, {**arrays, "extra": np.zeros(1)})
