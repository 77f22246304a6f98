"""JSON checkpoints for supernet stores and standalone networks.

Floats are written with ``repr`` precision, so a save/load round trip is
exact and two identical runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .autodiff import Tensor
from .nn import BatchNormState, Network, NetworkSpec, parameter_shapes
from .supernet import SharedParameterStore, assemble_store, expand

SUPERNET_FORMAT = "tinydistill-supernet/1"
NETWORK_FORMAT = "tinydistill-network/1"


class CheckpointError(IOError):
    """Unreadable or inconsistent checkpoint."""


def atomic_write_text(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _enc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _dec(d: dict) -> np.ndarray:
    arr = np.asarray(d["data"], dtype=np.float64)
    shape = tuple(int(s) for s in d["shape"])
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor data length {arr.size} does not match shape {shape}")
    return arr.reshape(shape)


def _enc_bn(bn: Dict[int, BatchNormState]) -> dict:
    return {
        str(i): {
            "gamma": _enc(s.gamma.data),
            "beta": _enc(s.beta.data),
            "running_mean": _enc(s.running_mean),
            "running_var": _enc(s.running_var),
            "momentum": s.momentum,
            "eps": s.eps,
        }
        for i, s in bn.items()
    }


def _dec_bn(d: dict) -> Dict[int, BatchNormState]:
    return {
        int(i): BatchNormState(
            gamma=Tensor(_dec(s["gamma"]), requires_grad=True),
            beta=Tensor(_dec(s["beta"]), requires_grad=True),
            running_mean=_dec(s["running_mean"]),
            running_var=_dec(s["running_var"]),
            momentum=float(s["momentum"]),
            eps=float(s["eps"]),
        )
        for i, s in d.items()
    }


def _check_params(spec: NetworkSpec, params: Dict[str, np.ndarray]) -> None:
    expected = parameter_shapes(spec)
    if set(expected) != set(params):
        raise CheckpointError(f"parameter names {sorted(params)} do not match spec {sorted(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{name}: stored shape {params[name].shape}, spec wants {shape}")


def store_to_dict(store: SharedParameterStore) -> dict:
    return {
        "format": SUPERNET_FORMAT,
        "student_spec": store.student_spec.model_dump(mode="json"),
        "expansion_rate": store.expansion_rate,
        "seed": store.seed,
        "teacher": {name: _enc(t.data) for name, t in store.shared.items()},
        "teacher_bn": _enc_bn(store.teacher_bn),
        "student_bn": _enc_bn(store.student_bn),
    }


def network_to_dict(net: Network) -> dict:
    return {
        "format": NETWORK_FORMAT,
        "spec": net.spec.model_dump(mode="json"),
        "params": {name: _enc(t.data) for name, t in net.params.items()},
        "bn": _enc_bn(net.bn),
    }


def save_store(store: SharedParameterStore, path) -> None:
    atomic_write_text(path, json.dumps(store_to_dict(store)))


def save_network(net: Network, path) -> None:
    atomic_write_text(path, json.dumps(network_to_dict(net)))


def _store_from_dict(doc: dict) -> SharedParameterStore:
    spec = NetworkSpec.model_validate(doc["student_spec"])
    k = int(doc["expansion_rate"])
    teacher = {name: _dec(v) for name, v in doc["teacher"].items()}
    _check_params(expand(spec, k), teacher)
    shared = {name: Tensor(v, requires_grad=True) for name, v in teacher.items()}
    return assemble_store(spec, k, int(doc["seed"]), shared,
                          _dec_bn(doc["teacher_bn"]), _dec_bn(doc["student_bn"]))


def _network_from_dict(doc: dict) -> Network:
    spec = NetworkSpec.model_validate(doc["spec"])
    params = {name: _dec(v) for name, v in doc["params"].items()}
    _check_params(spec, params)
    return Network(spec, {n: Tensor(v, requires_grad=True) for n, v in params.items()}, _dec_bn(doc["bn"]))


def load_checkpoint(path) -> Tuple[str, Union[SharedParameterStore, Network]]:
    """Load either kind of checkpoint; returns ``("supernet"|"network", obj)``."""
    try:
        doc = json.loads(Path(path).read_text())
        fmt = doc.get("format")
        if fmt == SUPERNET_FORMAT:
            return "supernet", _store_from_dict(doc)
        if fmt == NETWORK_FORMAT:
            return "network", _network_from_dict(doc)
        raise CheckpointError(f"unknown checkpoint format {fmt!r}")
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def load_store(path) -> SharedParameterStore:
    kind, obj = load_checkpoint(path)
    if kind != "supernet":
        raise CheckpointError(f"{path} is a standalone network, not a supernet checkpoint")
    return obj


def load_network(path) -> Network:
    kind, obj = load_checkpoint(path)
    if kind != "network":
        raise CheckpointError(f"{path} is a supernet checkpoint, not a standalone network")
    return obj
