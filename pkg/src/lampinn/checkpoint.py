"""Versioned checkpoints for dense and modular networks.

The payload is the flat parameter vector in layout order (input nets, meta
net, then the routing weights).  Dense networks are stored with ``K = 0``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .binfmt import pack, unpack
from .errors import CheckpointError
from .lam import ModularNet
from .netcore import DenseNet, zeros_dense

MAGIC = b"LAMCKPT\x00"
VERSION = 1


def to_bytes(model, family: str = "", seeds: dict | None = None, assignments: dict | None = None) -> bytes:
    header = {"family": family, "seeds": dict(seeds or {}), "assignments": dict(assignments or {})}
    if isinstance(model, ModularNet):
        header.update(
            kind="modular",
            K=model.K,
            split_depth=model.split_depth,
            in_sizes=list(model.in0.layer_sizes),
            meta_sizes=list(model.meta.layer_sizes),
            activation=model.activation,
            meta_activate_output=model.meta.activate_output,
        )
    elif isinstance(model, DenseNet):
        header.update(
            kind="dense",
            K=0,
            split_depth=0,
            layer_sizes=list(model.layer_sizes),
            activation=model.activation,
            activate_output=model.activate_output,
        )
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    return pack(MAGIC, VERSION, header, model.vector())


def from_bytes(blob: bytes):
    """Returns (model, header)."""
    header, payload = unpack(blob, MAGIC, VERSION)
    try:
        if header["kind"] == "dense":
            like = zeros_dense(header["layer_sizes"], header["activation"], header["activate_output"])
        elif header["kind"] == "modular":
            act = header["activation"]
            in0 = zeros_dense(header["in_sizes"], act, True)
            like = ModularNet(
                in0,
                [zeros_dense(header["in_sizes"], act, True) for _ in range(header["K"])],
                zeros_dense(header["meta_sizes"], act, header["meta_activate_output"]),
                np.zeros(header["K"]),
                header["split_depth"],
            )
        else:
            raise CheckpointError(f"unknown model kind {header['kind']!r}", offset=16)
    except KeyError as exc:
        raise CheckpointError(f"header lacks field {exc}", offset=16) from None
    if payload.size != like.n_params:
        raise CheckpointError(
            f"payload holds {payload.size} values, architecture needs {like.n_params}", offset=len(blob)
        )
    return like.with_vector(payload), header


def save(path, model, **kwargs) -> None:
    Path(path).write_bytes(to_bytes(model, **kwargs))


def load(path):
    return from_bytes(Path(path).read_bytes())
