import json
import struct
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError

from src.core.errors import ConfigError, CorruptionError, FormatError, LayerNotFoundError, VersionError
from src.core.models import ModelSpec, Precision
from src.core.tensor import no_grad
from src.model.resnet import build_axial_resnet, model_forward
from src.storage.checkpoint import (
    Checkpoint,
    atomic_write,
    fnv1a64,
    load_checkpoint,
    load_dataset,
    load_model,
    save_checkpoint,
    save_dataset,
    save_model,
    sha256_64,
)
from src.storage.export import dump_attention, select_layer
from src.storage.run_config import RunConfig, config_hash, load_run_config
from src.train.task import generate_task

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


def encoded(tensors=None, metadata=None) -> bytes:
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)} if tensors is None else tensors
    return Checkpoint(tensors, metadata or {"note": "x"}).encode()


# Checkpoint container -------------------------------------------------------

def test_round_trip_keeps_dtypes_and_shapes(tmp_path: Path) -> None:
    tensors = {
        "f64": np.linspace(0, 1, 5),
        "f32": np.ones((2, 2), dtype=np.float32),
        "i64": np.arange(4, dtype=np.int64).reshape(2, 2),
        "u8": np.array([0, 255], dtype=np.uint8),
        "big": np.array([1.5, -2.0], dtype=">f8"),
        "scalar": np.array(3.0),
    }
    path = save_checkpoint(tmp_path / "c.axck", tensors, {"kind": "test"})
    loaded = load_checkpoint(path)
    assert loaded.metadata == {"kind": "test"}
    assert set(loaded.tensors) == set(tensors)
    for name, array in tensors.items():
        assert loaded.tensors[name].shape == array.shape
        assert_array_equal(loaded.tensors[name], array)
    assert loaded.tensors["f32"].dtype == np.float32
    assert loaded.tensors["i64"].dtype == np.int64


def test_layout_of_a_single_tensor() -> None:
    blob = encoded()
    magic, version, header_len = struct.unpack_from("<4sIQ", blob)
    assert magic == b"AXCK" and version == 1
    header = json.loads(blob[16:16 + header_len])
    assert header["tensors"]["a"] == {"dtype": "<f4", "shape": [2, 3], "offset": 0, "length": 24}
    assert len(blob) == 16 + header_len + 24 + 8
    payload = np.frombuffer(blob[16 + header_len:16 + header_len + 24], dtype="<f4")
    assert_array_equal(payload, np.arange(6))


def test_truncated_file_is_corrupt() -> None:
    blob = encoded()
    with pytest.raises(CorruptionError):
        Checkpoint.decode(blob[:-1])
    with pytest.raises(CorruptionError):
        Checkpoint.decode(blob[:10])


@pytest.mark.parametrize("checksum", ["sha256-64", "fnv1a-64"])
def test_flipped_payload_bit_is_corrupt(checksum: str) -> None:
    blob = bytearray(Checkpoint({"a": np.arange(6, dtype=np.float32)}, {}, checksum).encode())
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    blob[16 + header_len + 3] ^= 0x01
    with pytest.raises(CorruptionError):
        Checkpoint.decode(bytes(blob))


def test_header_names_the_payload_checksum() -> None:
    blob = encoded()
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + header_len])
    assert header["checksum"] == "sha256-64"
    payload = blob[16 + header_len:-8]
    assert struct.unpack("<Q", blob[-8:])[0] == sha256_64(payload)
    assert Checkpoint.decode(blob).checksum == "sha256-64"


def test_header_without_checksum_key_verifies_fnv1a() -> None:
    payload = np.arange(3, dtype="<f8").tobytes()
    header = json.dumps({"tensors": {"a": {"dtype": "<f8", "shape": [3], "offset": 0, "length": 24}},
                         "metadata": {}, "payload_length": 24}).encode("utf-8")
    blob = struct.pack("<4sIQ", b"AXCK", 1, len(header)) + header + payload + struct.pack("<Q", fnv1a64(payload))
    loaded = Checkpoint.decode(blob)
    assert loaded.checksum == "fnv1a-64"
    assert_array_equal(loaded.tensors["a"], np.arange(3))
    with pytest.raises(CorruptionError):
        Checkpoint.decode(blob[:-8] + struct.pack("<Q", sha256_64(payload)))


def test_unknown_checksum_is_a_format_error() -> None:
    with pytest.raises(FormatError):
        Checkpoint({"a": np.zeros(1)}, {}, "crc7").encode()


def test_bad_magic_and_empty_file() -> None:
    with pytest.raises(FormatError):
        Checkpoint.decode(b"NOPE" + encoded()[4:])
    with pytest.raises(FormatError):
        Checkpoint.decode(b"")


def test_newer_version_is_refused() -> None:
    blob = bytearray(encoded())
    struct.pack_into("<I", blob, 4, 2)
    with pytest.raises(VersionError):
        Checkpoint.decode(bytes(blob))


def test_atomic_write_leaves_only_the_target(tmp_path: Path) -> None:
    save_checkpoint(tmp_path / "one.axck", {"a": np.zeros(2)})
    save_checkpoint(tmp_path / "one.axck", {"a": np.ones(2)})
    assert [p.name for p in tmp_path.iterdir()] == ["one.axck"]
    assert_array_equal(load_checkpoint(tmp_path / "one.axck").tensors["a"], np.ones(2))


def test_atomic_write_replaces_text_files(tmp_path: Path) -> None:
    target = tmp_path / "nested" / "records.json"
    atomic_write(target, "[1]")
    atomic_write(target, "[1, 2]")
    assert json.loads(target.read_text()) == [1, 2]
    assert [p.name for p in target.parent.iterdir()] == ["records.json"]


def test_model_round_trip(tmp_path: Path, tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, seed=4, precision=Precision.FLOAT64)
    params = dict(model.named_parameters())
    params["head.fc.weight"].data = rng.normal(size=params["head.fc.weight"].shape)
    path = save_model(model, tmp_path / "m.axck", "cafe", {"step": 7})
    restored = load_model(path)
    assert restored.spec == model.spec
    assert restored.precision is Precision.FLOAT64
    meta = load_checkpoint(path).metadata
    assert meta["config_hash"] == "cafe" and meta["step"] == 7
    x = rng.normal(size=(2, 8, 8, 3))
    with no_grad():
        assert_array_equal(model_forward(model, x).data, model_forward(restored, x).data)


def test_dataset_round_trip_and_kind_checks(tmp_path: Path, tiny_spec: ModelSpec, small_task) -> None:
    data = generate_task(small_task, 6)
    path = save_dataset(data, tmp_path / "d.axck")
    loaded = load_dataset(path)
    assert_array_equal(loaded.images, data.images)
    assert_array_equal(loaded.labels, data.labels)
    assert_array_equal(loaded.markers, data.markers)
    assert loaded.metadata["seed"] == data.metadata["seed"]
    with pytest.raises(FormatError):
        load_model(path)
    model_path = save_model(build_axial_resnet(tiny_spec), tmp_path / "m.axck")
    with pytest.raises(FormatError):
        load_dataset(model_path)


# Run configuration ------------------------------------------------------------

def test_defaults_validate() -> None:
    run = RunConfig()
    assert run.model.to_spec().name == "axial-resnet"
    assert run.optimizer.momentum == 0.9
    assert len(run.hash) == 16
    int(run.hash, 16)


def test_unknown_keys_are_rejected() -> None:
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"model": {"colour": "red"}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"extras": {}})


def test_invalid_model_section_is_a_validation_error() -> None:
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"model": {"stem": "full_axial", "spans": "global"}})
    with pytest.raises(ValidationError):
        RunConfig.model_validate({"optimizer": {"momentum": 1.0}})


def test_hash_is_stable_and_content_sensitive() -> None:
    a = RunConfig.model_validate({"optimizer": {"learning_rate": 0.1}})
    b = RunConfig.model_validate({"optimizer": {"learning_rate": 0.1}})
    c = RunConfig.model_validate({"optimizer": {"learning_rate": 0.2}})
    assert a.hash == b.hash
    assert a.hash != c.hash
    assert config_hash(a.model_dump(mode="json")) == a.hash


def test_load_run_config_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(broken)
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_run_config(listed)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.json")))
def test_shipped_configs_load(name: str) -> None:
    run = load_run_config(CONFIG_DIR / name)
    assert run.model.to_spec().name == run.model.name


def test_toy_config_matches_task() -> None:
    run = load_run_config(CONFIG_DIR / "toy_longrange.json")
    spec = run.model.to_spec()
    assert spec.num_classes == 2
    assert spec.in_channels == run.task.channels
    assert spec.resolution == run.task.grid


# Attention export ---------------------------------------------------------------

def local_one_spec(tiny_spec: ModelSpec) -> ModelSpec:
    data = tiny_spec.to_dict()
    data.update({"name": "tiny-local1", "spans": [1, 1]})
    return ModelSpec.from_dict(data)


def test_dump_attention_rows_sum_to_one(tmp_path: Path, tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    index_path = dump_attention(model, rng.normal(size=(1, 8, 8, 3)), "stage1.block0.attn_w", tmp_path)
    index = json.loads(index_path.read_text())
    assert index["layer"] == "stage1.block0.attn_w"
    assert index["kind"] == "axial" and index["axis"] == "width"
    assert index["span"] == "global"
    assert index["heads"] == [0, 1]
    assert index["lines"] == 8 and index["length"] == 8
    assert len(index["files"]) == 16
    assert index["max_row_sum_error"] < 1e-12
    entry = index["files"][3]
    assert entry == {"head": 0, "line": 3, "file": "stage1.block0.attn_w.head0.line3.csv", "batch": 0, "row": 3}
    matrix = np.loadtxt(tmp_path / entry["file"], delimiter=",")
    assert matrix.shape == (8, 8)
    assert_allclose(matrix.sum(axis=1), 1.0, atol=1e-8)
    written = sorted(p.name for p in tmp_path.iterdir())
    assert written == sorted([e["file"] for e in index["files"]] + [index_path.name])


def test_span_one_attention_is_the_identity(tmp_path: Path, tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(local_one_spec(tiny_spec), precision=Precision.FLOAT64)
    index_path = dump_attention(model, rng.normal(size=(2, 8, 8, 3)), "stage1.block0.attn_h", tmp_path, heads=[1])
    index = json.loads(index_path.read_text())
    assert index["axis"] == "height"
    assert index["span"] == 1
    assert index["lines"] == 16
    assert index["files"][-1]["batch"] == 1 and index["files"][-1]["column"] == 7
    for entry in index["files"]:
        assert_array_equal(np.loadtxt(tmp_path / entry["file"], delimiter=","), np.eye(8))


def test_layer_selection_errors(tmp_path: Path, tiny_spec: ModelSpec) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    assert select_layer(model, "stage2.block0.attn_w").name == "stage2.block0.attn_w"
    with pytest.raises(LayerNotFoundError):
        select_layer(model, "attn_w")
    with pytest.raises(LayerNotFoundError):
        select_layer(model, "stage9.block0.attn_h")
    with pytest.raises(LayerNotFoundError):
        dump_attention(model, np.zeros((1, 8, 8, 3)), "stage1.block0.attn_h", tmp_path, heads=[2])
