"""Versioned binary model files.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ENTLINK\\x00"
    8       4     format version (uint32), currently 1
    12      8     header length L in bytes (uint64)
    20      L     header: UTF-8 JSON with sorted keys and no whitespace
    20+L    ...   parameter blocks, float64 little-endian, C order

The header holds ``config`` (model dimensions and variant flags),
``vocab`` (token list, index = id), ``catalog`` (entity names and main
entity ids) and ``params``, an ordered list of ``[name, shape]`` giving the
order and size of the blocks that follow.  Saving a loaded model
reproduces the original file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict

import numpy as np

from .autodiff import parameter
from .corpus import EntityCatalog, Vocabulary
from .models import ModelBundle, ModelConfig, ModelFlags

MAGIC = b"ENTLINK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class ModelFileError(ValueError):
    pass


def _header(bundle: ModelBundle) -> dict:
    return {
        "config": asdict(bundle.config),
        "vocab": list(bundle.vocab.itos),
        "catalog": {"names": list(bundle.catalog.names), "main": sorted(bundle.catalog.main)},
        "params": [[name, list(p.shape)] for name, p in bundle.params.items()],
    }


def model_bytes(bundle: ModelBundle) -> bytes:
    header = json.dumps(_header(bundle), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in bundle.params.values())
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + blocks


def save_model(bundle: ModelBundle, path):
    with open(path, "wb") as fh:
        fh.write(model_bytes(bundle))


def model_from_bytes(raw: bytes, source="<bytes>") -> ModelBundle:
    if len(raw) < _PREFIX.size:
        raise ModelFileError(f"{source}: too short to be a model file")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFileError(f"{source}: not a model file (bad magic bytes)")
    if version != VERSION:
        raise ModelFileError(f"{source}: unsupported model format version {version}; this build reads {VERSION}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
        cfg = dict(header["config"])
        cfg["flags"] = ModelFlags(**cfg["flags"])
        config = ModelConfig(**cfg)
        vocab = Vocabulary(tuple(header["vocab"]))
        catalog = EntityCatalog(tuple(header["catalog"]["names"]), frozenset(header["catalog"]["main"]))
        layout = [(str(n), tuple(int(d) for d in shape)) for n, shape in header["params"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise ModelFileError(f"{source}: malformed header ({err})") from None
    params = {}
    offset = start
    for name, shape in layout:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(raw):
            raise ModelFileError(f"{source}: truncated while reading parameter {name}")
        params[name] = parameter(np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset)
                                 .astype(np.float64).reshape(shape), name=name)
        offset += n
    if offset != len(raw):
        raise ModelFileError(f"{source}: {len(raw) - offset} trailing bytes after the last parameter")
    return ModelBundle(config, vocab, catalog, params)


def load_model(path) -> ModelBundle:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), str(path))


def model_digest(bundle: ModelBundle) -> str:
    return hashlib.sha256(model_bytes(bundle)).hexdigest()
