import json

import numpy as np
import pytest

from edgecil import bundle, data, memory, nn, trainer
from edgecil.errors import BundleChecksumError, BundleError, BundleShapeError, BundleVersionError


@pytest.fixture
def sample_bundle(rng):
    specs = nn.mlp_specs(80, (16, 8))
    net = nn.new_network(specs, 8, seed=4)
    nn.embed_batch(net, rng.normal(size=(12, 80)))  # non-trivial running stats
    net.eval()
    X = rng.normal(size=(30, 80))
    y = np.repeat(["run", "walk", "still"], 10)
    support = memory.build_support(net, X, y, 4)
    norm = data.Normalizer(rng.normal(size=80), rng.uniform(0.5, 2.0, size=80))
    return bundle.TransferBundle(net, support, norm, config=trainer.TrainConfig(dims=(16, 8)))


def test_save_twice_is_byte_identical(tmp_path, sample_bundle):
    a = bundle.save_bundle(sample_bundle, tmp_path / "a")
    b = bundle.save_bundle(sample_bundle, tmp_path / "b")
    for name in (bundle.MANIFEST, bundle.PAYLOAD):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_roundtrip_structure(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    back = bundle.load_bundle(tmp_path / "a")
    assert not back.network.training
    assert back.network.specs == sample_bundle.network.specs
    for k, v in sample_bundle.network.params.items():
        np.testing.assert_array_equal(back.network.params[k], v.astype(np.float32).astype(np.float64))
    for k, v in sample_bundle.network.buffers.items():
        np.testing.assert_array_equal(back.network.buffers[k], v.astype(np.float32).astype(np.float64))
    assert back.support.labels == sample_bundle.support.labels
    for label in back.support.labels:
        np.testing.assert_array_equal(back.support.exemplars[label].indices,
                                      sample_bundle.support.exemplars[label].indices)
    np.testing.assert_array_equal(back.normalizer.std, sample_bundle.normalizer.std.astype(np.float32))
    assert back.config == sample_bundle.config
    assert back.layout == sample_bundle.layout


def test_save_load_save_identical(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    bundle.save_bundle(bundle.load_bundle(tmp_path / "a"), tmp_path / "b")
    for name in (bundle.MANIFEST, bundle.PAYLOAD):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_loaded_network_embeddings_close(tmp_path, sample_bundle, rng):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    back = bundle.load_bundle(tmp_path / "a")
    x = rng.uniform(-1, 1, size=(50, 80))
    diff = np.abs(nn.embed_batch(back.network, x) - nn.embed_batch(sample_bundle.network, x))
    assert diff.max() < 1e-5


def test_payload_layout(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    payload = (tmp_path / "a" / bundle.PAYLOAD).read_bytes()
    manifest = json.loads((tmp_path / "a" / bundle.MANIFEST).read_text())
    assert payload[:8] == b"ECILPAYL"
    assert int.from_bytes(payload[8:12], "little") == bundle.FORMAT_VERSION
    names = [t["name"] for t in manifest["tensors"]]
    assert names[:8] == ["norm.mean", "norm.std", "0.weight", "0.bias", "0.gamma", "0.beta",
                         "0.running_mean", "0.running_var"]
    assert names[-3:] == ["exemplars.0", "exemplars.1", "exemplars.2"]
    w = manifest["tensors"][2]
    weight = np.frombuffer(payload, "<f4", count=80 * 16, offset=w["offset"]).reshape(80, 16)
    np.testing.assert_array_equal(weight, sample_bundle.network.params["0.weight"].astype(np.float32))
    assert manifest["payload"]["bytes"] == len(payload)


def test_tampered_payload_rejected(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    p = tmp_path / "a" / bundle.PAYLOAD
    raw = bytearray(p.read_bytes())
    raw[100] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(BundleChecksumError):
        bundle.load_bundle(tmp_path / "a")


def test_unknown_version_rejected(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    p = tmp_path / "a" / bundle.PAYLOAD
    raw = bytearray(p.read_bytes())
    raw[8] = 9  # payload version byte
    p.write_bytes(bytes(raw))
    with pytest.raises(BundleVersionError):
        bundle.load_bundle(tmp_path / "a")

    bundle.save_bundle(sample_bundle, tmp_path / "b")
    m = tmp_path / "b" / bundle.MANIFEST
    doc = json.loads(m.read_text())
    doc["format_version"] = 2
    m.write_text(json.dumps(doc))
    with pytest.raises(BundleVersionError):
        bundle.load_bundle(tmp_path / "b")


def test_shape_mismatch_rejected(tmp_path, sample_bundle):
    bundle.save_bundle(sample_bundle, tmp_path / "a")
    m = tmp_path / "a" / bundle.MANIFEST
    doc = json.loads(m.read_text())
    doc["layers"][0]["output_dim"] = 15
    doc["layers"][1]["input_dim"] = 15
    m.write_text(json.dumps(doc))
    with pytest.raises(BundleShapeError):
        bundle.load_bundle(tmp_path / "a")


def test_error_classes_are_distinct():
    assert len({BundleVersionError, BundleChecksumError, BundleShapeError}) == 3
    assert all(issubclass(e, BundleError) for e in (BundleVersionError, BundleChecksumError, BundleShapeError))


def test_missing_bundle_names_path(tmp_path):
    with pytest.raises(BundleError, match="nowhere"):
        bundle.load_bundle(tmp_path / "nowhere")


def test_unwritable_destination(tmp_path, sample_bundle):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(BundleError, match="file"):
        bundle.save_bundle(sample_bundle, blocker / "sub")
