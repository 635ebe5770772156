import json

import pytest
import torch

from fungen.checkpoint import MANIFEST, TENSORS, checkpoint_summary, load_checkpoint, save_checkpoint
from fungen.denoiser import init_params, parameter_bytes
from fungen.errors import CorruptCheckpoint
from fungen.seqcore import LabelRegistry, Registries


@pytest.fixture
def registries():
    return Registries(
        go=LabelRegistry("go", ["GO:0001", "GO:0002", "GO:0003", "GO:0004"]),
        ipr=LabelRegistry("ipr", ["IPR000001", "IPR000002"]),
        ec=LabelRegistry("ec", ["1.1.1.1", "2.7.11.1"]),
    )


@pytest.fixture
def saved(tmp_path, tiny_config, registries):
    model = init_params(tiny_config, seed=11)
    with torch.no_grad():
        for param in model.parameters():
            param.add_(0.01)
    path = save_checkpoint(model, registries, tmp_path / "ckpt", extra={"training": {"steps": 3}})
    return model, path


def test_round_trip_is_bit_exact(saved, registries):
    model, path = saved
    loaded, config, loaded_registries = load_checkpoint(path)
    assert parameter_bytes(loaded) == parameter_bytes(model)
    assert config == model.config
    assert loaded_registries.content_hash == registries.content_hash
    assert not loaded.training


def test_manifest_layout(saved):
    model, path = saved
    manifest = json.loads((path / MANIFEST).read_text())
    names = [entry["name"] for entry in manifest["tensors"]]
    assert names == list(model.state_dict())
    offset = 0
    for entry in manifest["tensors"]:
        assert entry["dtype"] == "f32"
        assert entry["byte_offset"] == offset
        offset += entry["byte_len"]
    assert offset == (path / TENSORS).stat().st_size


def test_summary(saved):
    model, path = saved
    summary = checkpoint_summary(path)
    assert summary["parameter_count"] == sum(p.numel() for p in model.parameters())
    assert summary["registry_sizes"] == {"go": 4, "ipr": 2, "ec": 2}
    assert summary["training"] == {"steps": 3}


def test_truncated_tensor_file(saved):
    _, path = saved
    blob = (path / TENSORS).read_bytes()
    (path / TENSORS).write_bytes(blob[:-4])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_trailing_bytes(saved):
    _, path = saved
    with open(path / TENSORS, "ab") as handle:
        handle.write(b"\x00" * 4)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_expected_hash_mismatch(saved):
    _, path = saved
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path, expected_hash="0" * 64)


def test_tampered_registries(saved):
    _, path = saved
    manifest = json.loads((path / MANIFEST).read_text())
    manifest["registries"]["go"] = list(reversed(manifest["registries"]["go"]))
    (path / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_shape_mismatch(saved):
    _, path = saved
    manifest = json.loads((path / MANIFEST).read_text())
    manifest["tensors"][0]["shape"] = [1]
    (path / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_missing_directory(tmp_path):
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "absent")


def test_registry_sizes_must_match_model(tmp_path, tiny_config):
    with pytest.raises(CorruptCheckpoint):
        save_checkpoint(init_params(tiny_config), Registries.from_sizes(go=1), tmp_path / "bad")


def test_overwrite_replaces_directory(tmp_path, tiny_config, registries):
    path = tmp_path / "ckpt"
    save_checkpoint(init_params(tiny_config, seed=1), registries, path, files={"note.txt": "first"})
    save_checkpoint(init_params(tiny_config, seed=2), registries, path)
    assert not (path / "note.txt").exists()
    loaded, _, _ = load_checkpoint(path)
    assert parameter_bytes(loaded) == parameter_bytes(init_params(tiny_config, seed=2))
