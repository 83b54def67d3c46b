"""Checkpoint round-trip and corruption handling."""

import json
import zipfile

import numpy as np
import numpy.testing as npt
import pytest

import sparseformer.tensor as T
from sparseformer.attention import AttentionConfig
from sparseformer.checkpoint import load_checkpoint, save_checkpoint
from sparseformer.encoder import EncoderConfig, GranularitySpec, SparseformerModel
from sparseformer.errors import ConfigError, DataError
from sparseformer.tensor import Tensor


@pytest.fixture(autouse=True)
def _double_precision():
    with T.precision("double"):
        yield


def small_model(seed=0):
    cfg = EncoderConfig(granularities=GranularitySpec((5,)),
                        intra_token_list=(4, 3), inter_tokens=2, cross_tokens=1,
                        attention=AttentionConfig(model_dim=4, num_heads=2,
                                                  dropout=0.0, prior_dim=2),
                        max_patches=8)
    return SparseformerModel(np.random.default_rng(seed), cfg), cfg


def test_round_trip_is_byte_exact(tmp_path):
    path = tmp_path / "model.ckpt"
    rng = np.random.default_rng(1)
    params = {"a.w": Tensor(rng.standard_normal((3, 4))),
              "a.b": Tensor(rng.standard_normal(4)),
              "z": Tensor(rng.standard_normal((2, 2, 2)))}
    save_checkpoint(path, params, config={"model_dim": 4})
    config, manifest, arrays = load_checkpoint(path)
    assert config == {"model_dim": 4}
    assert manifest["format_version"] == 1
    assert manifest["precision"] == "double"
    assert sorted(arrays) == sorted(params)
    for name, tensor in params.items():
        assert arrays[name].tobytes() == tensor.data.tobytes()


def test_manifest_lists_names_and_shapes(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": Tensor(np.zeros((2, 3)))}, config={})
    _, manifest, _ = load_checkpoint(path)
    assert manifest["params"] == [{"name": "w", "shape": [2, 3]}]


def test_model_forward_identical_after_reload(tmp_path):
    path = tmp_path / "model.ckpt"
    model, cfg = small_model(seed=2)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 2))
    prior = Tensor(rng.standard_normal(2))
    before = model.encode_sample(x, prior=prior).data

    save_checkpoint(path, dict(model.named_params()), config={"note": "test"})
    fresh, _ = small_model(seed=99)  # different init, same architecture
    _, _, arrays = load_checkpoint(path)
    fresh.load_state(arrays)
    after = fresh.encode_sample(x, prior=prior).data
    assert after.tobytes() == before.tobytes()


def test_single_precision_checkpoints_use_four_byte_floats(tmp_path):
    path = tmp_path / "model.ckpt"
    with T.precision("single"):
        save_checkpoint(path, {"w": Tensor(np.ones((4, 4)))}, config={})
        _, manifest, arrays = load_checkpoint(path)
    assert manifest["precision"] == "single"
    assert arrays["w"].dtype == np.dtype("<f4")


def test_missing_manifest_is_a_data_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("params/w.bin", b"\x00" * 8)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_non_zip_file_is_a_data_error(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"definitely not a zip archive")
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_truncated_parameter_payload_is_a_data_error(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": Tensor(np.ones((4, 4)))}, config={})
    with zipfile.ZipFile(path) as zf:
        manifest = zf.read("manifest.json")
        payload = zf.read("params/w.bin")
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", manifest)
        zf.writestr("params/w.bin", payload[:-8])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_unknown_precision_is_a_data_error(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, {"w": Tensor(np.ones(2))}, config={})
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        payload = zf.read("params/w.bin")
    manifest["precision"] = "half"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("params/w.bin", payload)
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_loading_into_mismatched_model_is_a_config_error(tmp_path):
    path = tmp_path / "model.ckpt"
    model, _ = small_model(seed=4)
    save_checkpoint(path, dict(model.named_params()), config={})
    other_cfg = EncoderConfig(granularities=GranularitySpec((5, 10)),
                              intra_token_list=(4, 3), inter_tokens=2,
                              cross_tokens=1,
                              attention=AttentionConfig(model_dim=4, num_heads=2,
                                                        dropout=0.0, prior_dim=2),
                              max_patches=8)
    other = SparseformerModel(np.random.default_rng(5), other_cfg)
    _, _, arrays = load_checkpoint(path)
    with pytest.raises(ConfigError):
        other.load_state(arrays)
