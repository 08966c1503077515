"""Cloud-to-edge transfer bundle.

A bundle is a directory holding two files:

``manifest.json``
    UTF-8 JSON (sorted keys, 2-space indent, trailing newline) with the
    format version, sensor layout, layer specs, batch-norm constants, the
    tensor table, exemplar metadata, the training config and the SHA-256 of
    the payload.

``payload.bin``
    16-byte header (``b"ECILPAYL"``, little-endian uint32 format version,
    uint32 zero) followed by every tensor as little-endian float32,
    row-major, in tensor-table order. Each table entry records ``name``,
    ``shape``, and the byte ``offset`` from the start of the file.

Tensor order: the normaliser (``norm.mean``, ``norm.std``), then per layer
``k.weight``, ``k.bias`` and, for batch-normalised layers, ``k.gamma``,
``k.beta``, ``k.running_mean``, ``k.running_var``, then one
``exemplars.<i>`` matrix per class in label order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Normalizer, SensorLayout
from .errors import BundleChecksumError, BundleError, BundleShapeError, BundleVersionError
from .memory import ExemplarSet, SupportSet
from .trainer import TrainConfig

FORMAT_VERSION = 1
MAGIC = b"ECILPAYL"
HEADER = struct.Struct("<8sII")
MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"


@dataclass
class TransferBundle:
    network: nn.EmbeddingNetwork
    support: SupportSet = field(default_factory=SupportSet)
    normalizer: Normalizer | None = None
    layout: SensorLayout = field(default_factory=SensorLayout)
    config: TrainConfig | None = None
    format_version: int = FORMAT_VERSION


def _tensors(bundle):
    net = bundle.network
    norm = bundle.normalizer or Normalizer.identity(net.input_dim)
    yield "norm.mean", norm.mean
    yield "norm.std", norm.std
    for k, spec in enumerate(net.specs):
        yield f"{k}.weight", net.params[f"{k}.weight"]
        yield f"{k}.bias", net.params[f"{k}.bias"]
        if spec.has_batchnorm:
            yield f"{k}.gamma", net.params[f"{k}.gamma"]
            yield f"{k}.beta", net.params[f"{k}.beta"]
            yield f"{k}.running_mean", net.buffers[f"{k}.running_mean"]
            yield f"{k}.running_var", net.buffers[f"{k}.running_var"]
    for i, label in enumerate(bundle.support.labels):
        yield f"exemplars.{i}", bundle.support.exemplars[label].samples


def _plain(value):
    return value.item() if isinstance(value, np.generic) else value


def encode(bundle):
    """Return ``(manifest_bytes, payload_bytes)``; deterministic for equal inputs."""
    body = bytearray()
    table = []
    offset = HEADER.size
    for name, array in _tensors(bundle):
        raw = np.ascontiguousarray(array, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
        body += raw
        offset += len(raw)
    payload = HEADER.pack(MAGIC, bundle.format_version, 0) + bytes(body)
    net = bundle.network
    manifest = {
        "format_version": bundle.format_version,
        "layout": {
            "triaxial_sensors": bundle.layout.triaxial_sensors,
            "scalar_sensors": bundle.layout.scalar_sensors,
            "sample_rate": bundle.layout.sample_rate,
        },
        "layers": [
            {"input_dim": s.input_dim, "output_dim": s.output_dim,
             "has_batchnorm": s.has_batchnorm, "has_relu": s.has_relu}
            for s in net.specs
        ],
        "batchnorm": {"eps": net.eps, "momentum": net.momentum},
        "byte_order": "little",
        "dtype": "float32",
        "tensors": table,
        "exemplars": [
            {"label": _plain(label), "tensor": f"exemplars.{i}",
             "indices": [int(v) for v in bundle.support.exemplars[label].indices]}
            for i, label in enumerate(bundle.support.labels)
        ],
        "config": bundle.config.to_dict() if bundle.config is not None else None,
        "payload": {"file": PAYLOAD, "bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()},
    }
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    return text.encode("utf-8"), payload


def save_bundle(bundle, destination):
    dest = Path(destination)
    manifest, payload = encode(bundle)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        (dest / PAYLOAD).write_bytes(payload)
        (dest / MANIFEST).write_bytes(manifest)
    except OSError as exc:
        raise BundleError(f"cannot write bundle to {dest}: {exc}") from exc
    return dest


def load_bundle(source):
    """Read, validate and rebuild a bundle; the network comes back in eval mode."""
    src = Path(source)
    try:
        manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
        payload = (src / PAYLOAD).read_bytes()
    except (OSError, ValueError) as exc:
        raise BundleError(f"cannot read bundle at {src}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"unsupported manifest format version {version!r}")
    if len(payload) < HEADER.size:
        raise BundleShapeError("payload shorter than its header")
    magic, payload_version, _ = HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise BundleVersionError(f"unrecognised payload magic {magic!r}")
    if payload_version != FORMAT_VERSION:
        raise BundleVersionError(f"unsupported payload format version {payload_version}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload"]["sha256"]:
        raise BundleChecksumError(f"payload checksum mismatch in {src}")

    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise BundleShapeError(f"tensor {entry['name']} runs past the end of the payload")
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = flat.astype(np.float64).reshape(entry["shape"])

    specs = [nn.LayerSpec(**layer) for layer in manifest["layers"]]
    params, buffers = {}, {}
    for k, spec in enumerate(specs):
        expected = {
            f"{k}.weight": (spec.input_dim, spec.output_dim),
            f"{k}.bias": (spec.output_dim,),
        }
        if spec.has_batchnorm:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                expected[f"{k}.{name}"] = (spec.output_dim,)
        for name, shape in expected.items():
            if name not in tensors or tensors[name].shape != shape:
                got = tensors[name].shape if name in tensors else None
                raise BundleShapeError(f"tensor {name}: expected shape {shape}, found {got}")
            (buffers if "running" in name else params)[name] = tensors[name]
    try:
        net = nn.EmbeddingNetwork(specs, params, buffers, **manifest["batchnorm"])
    except Exception as exc:
        raise BundleShapeError(str(exc)) from exc
    net.eval()

    norm = Normalizer(tensors["norm.mean"], tensors["norm.std"])
    if norm.mean.shape != (net.input_dim,) or norm.std.shape != (net.input_dim,):
        raise BundleShapeError("normaliser size does not match the network input")

    support = SupportSet()
    for entry in manifest["exemplars"]:
        samples = tensors[entry["tensor"]]
        if samples.ndim != 2 or samples.shape[1] != net.input_dim or len(samples) != len(entry["indices"]):
            raise BundleShapeError(f"exemplar tensor {entry['tensor']} has shape {samples.shape}")
        support.exemplars[entry["label"]] = ExemplarSet(entry["label"], samples, entry["indices"])

    config = TrainConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return TransferBundle(net, support, norm, SensorLayout(**manifest["layout"]), config, version)
