import json

import numpy as np
import pytest

from tinydistill.autodiff import Tensor
from tinydistill.checkpoint import (
    CheckpointError,
    atomic_write_text,
    load_checkpoint,
    load_network,
    load_store,
    save_network,
    save_store,
)
from tinydistill.nn import reference_cnn
from tinydistill.supernet import SupernetConfig, build_shared, export_student


@pytest.fixture
def store(rng):
    s = build_shared(SupernetConfig(expansion_rate=2, student_spec=reference_cnn()), 3)
    s.forward_teacher(Tensor(rng.uniform(size=(4, 3, 8, 8))), train=True)
    s.forward_student(Tensor(rng.uniform(size=(4, 3, 8, 8))), train=True)
    return s


def test_store_round_trip_exact(store, tmp_path, rng):
    save_store(store, tmp_path / "s.ckpt")
    again = load_store(tmp_path / "s.ckpt")
    for name, t in store.shared.items():
        np.testing.assert_array_equal(again.shared[name].data, t.data)
    for i, bn in store.student_bn.items():
        np.testing.assert_array_equal(again.student_bn[i].running_var, bn.running_var)
    x = Tensor(rng.uniform(size=(2, 3, 8, 8)))
    np.testing.assert_array_equal(again.forward_student(x).data, store.forward_student(x).data)
    # views must still alias after loading
    again.student_view["0.weight"].data[0, 0, 0, 0] = 11.0
    assert again.shared["0.weight"].data[0, 0, 0, 0] == 11.0


def test_network_round_trip_and_bytes(store, tmp_path):
    net = export_student(store)
    save_network(net, tmp_path / "a.ckpt")
    kind, again = load_checkpoint(tmp_path / "a.ckpt")
    assert kind == "network"
    save_network(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_wrong_kind(store, tmp_path):
    save_store(store, tmp_path / "s.ckpt")
    with pytest.raises(CheckpointError, match="supernet"):
        load_network(tmp_path / "s.ckpt")


@pytest.mark.parametrize("content", ["", "{not json", '{"format": "other"}', '{"format": "tinydistill-network/1"}'])
def test_corrupt(tmp_path, content):
    path = tmp_path / "bad.ckpt"
    path.write_text(content)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch_detected(store, tmp_path):
    save_network(export_student(store), tmp_path / "n.ckpt")
    doc = json.loads((tmp_path / "n.ckpt").read_text())
    doc["params"]["0.weight"]["shape"] = [8, 3, 3, 2]
    doc["params"]["0.weight"]["data"] = doc["params"]["0.weight"]["data"][: 8 * 3 * 3 * 2]
    (tmp_path / "n.ckpt").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="0.weight"):
        load_network(tmp_path / "n.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "x.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
    assert (tmp_path / "x.txt").read_text() == "hello"
