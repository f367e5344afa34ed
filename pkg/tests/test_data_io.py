import json
import os

import pytest
import torch
from structlog.testing import capture_logs

import utils.checkpoint as checkpoint_module
from utils.checkpoint import (
    CheckpointManifest,
    generator_state_hex,
    load_checkpoint,
    load_manifest,
    load_parameters,
    restore_generator,
    save_checkpoint,
    save_parameters,
)
from utils.config import SearchConfig, config_hash, format_config, parse_config, parse_config_text
from utils.datasets import CIFAR_RECORD_BYTES, gen_synthetic_dataset, load_cifar10_bin, parse_cifar10_records
from utils.errors import ConfigError, CorruptCheckpointError, DataFormatError, ImageRangeError
from utils.images import save_sample_grid, tile, to_bytes, write_ppm
from utils.run_logging import METRIC_FIELDS, RunRecorder, read_json_lines
from utils.tensor_core import Parameter


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def test_synthetic_dataset_is_balanced_and_deterministic():
    a = gen_synthetic_dataset(103, 16, 4, seed=5)
    b = gen_synthetic_dataset(103, 16, 4, seed=5)
    assert a.images.shape == (103, 3, 16, 16)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)
    counts = a.class_counts()
    assert max(counts) - min(counts) <= 1
    assert a.images.min().item() >= -1.0 and a.images.max().item() <= 1.0


def test_synthetic_dataset_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(10, 12, 4, seed=0)
    with pytest.raises(ConfigError):
        gen_synthetic_dataset(10, 16, 11, seed=0)


def test_sample_batch_pools_to_requested_resolution():
    data = gen_synthetic_dataset(20, 16, 2, seed=0)
    batch = data.sample_batch(6, torch.Generator().manual_seed(0), resolution=4)
    assert batch.shape == (6, 3, 4, 4)
    with pytest.raises(ConfigError):
        data.sample_batch(2, torch.Generator(), resolution=6)


def _cifar_records(labels):
    raw = bytearray()
    for k, label in enumerate(labels):
        raw.append(label)
        raw.extend(bytes([(k * 7 + i) % 256 for i in range(CIFAR_RECORD_BYTES - 1)]))
    return bytes(raw)


def test_cifar_records_parse_planes_and_scale():
    raw = _cifar_records([3, 9])
    pixels, labels = parse_cifar10_records(raw)
    assert labels.tolist() == [3, 9]
    assert pixels.shape == (2, 3, 32, 32)
    assert pixels[0, 0, 0, 0] == pytest.approx(-1.0)
    assert pixels[0, 0, 0, 1] == pytest.approx(1 / 127.5 - 1.0)
    # green plane starts after 1024 red bytes
    assert pixels[0, 1, 0, 0] == pytest.approx((1024 % 256) / 127.5 - 1.0)


def test_cifar_truncated_record_reports_byte_position():
    raw = _cifar_records([1, 2])[:-10]
    with pytest.raises(DataFormatError) as info:
        parse_cifar10_records(raw)
    assert info.value.byte_position == CIFAR_RECORD_BYTES


def test_cifar_bad_label_reports_byte_position():
    raw = _cifar_records([1, 2, 12])
    with pytest.raises(DataFormatError) as info:
        parse_cifar10_records(raw, offset=100)
    assert info.value.byte_position == 100 + 2 * CIFAR_RECORD_BYTES


def test_cifar_test_split_from_directory(tmp_path):
    (tmp_path / "test_batch.bin").write_bytes(_cifar_records([0, 5, 7]))
    data = load_cifar10_bin(str(tmp_path), "test")
    assert len(data) == 3 and data.num_classes == 10 and data.resolution == 32
    with pytest.raises(DataFormatError):
        load_cifar10_bin(str(tmp_path), "train")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def test_ppm_header_and_pixel_rounding():
    image = torch.tensor([[[-1.0, 1.0]], [[0.0, -1.0]], [[0.5, 1.0]]])
    data = write_ppm(image)
    header = b"P6\n2 1\n255\n"
    assert data.startswith(header)
    assert list(data[len(header):]) == [0, 128, 191, 255, 0, 255]


def test_gray_images_are_replicated_and_out_of_range_rejected():
    assert to_bytes(torch.zeros(1, 2, 2)).shape == (2, 2, 3)
    with pytest.raises(ImageRangeError):
        to_bytes(torch.full((3, 2, 2), 1.1))
    with pytest.raises(ImageRangeError):
        to_bytes(torch.zeros(2, 2, 2))


def test_sample_grid_file(tmp_path):
    images = torch.zeros(5, 3, 4, 4)
    grid = tile(images, columns=4, padding=1)
    assert grid.shape == (3, 2 * 5 + 1, 4 * 5 + 1)
    path = save_sample_grid(images, str(tmp_path / "samples" / "g.ppm"), columns=4)
    assert open(path, "rb").read().startswith(b"P6\n21 11\n255\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"a": torch.randn(3, 4, generator=g), "b/scalar": torch.tensor(2.5), "c": torch.randn(7, generator=g)}
    rng = torch.Generator().manual_seed(42)
    torch.rand(5, generator=rng)
    save_checkpoint(tensors, {"iteration": 3}, str(tmp_path), {"noise": rng}, config_hash="abc")

    loaded, manifest = load_checkpoint(str(tmp_path))
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert torch.equal(loaded[name], value)
    assert manifest.meta == {"iteration": 3}
    assert manifest.config_hash == "abc"

    restored = restore_generator(torch.Generator(), manifest.rng_states["noise"])
    assert torch.equal(torch.rand(4, generator=restored), torch.rand(4, generator=rng))


def test_corrupted_data_is_detected(tmp_path):
    manifest = save_checkpoint({"w": torch.ones(4)}, {}, str(tmp_path))
    path = tmp_path / manifest.data_file
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(str(tmp_path))


def test_inconsistent_manifest_is_detected(tmp_path):
    manifest = save_checkpoint({"w": torch.ones(4), "v": torch.ones(2)}, {}, str(tmp_path))
    text = manifest.to_text().replace("entry v 2 16 8", "entry v 2 20 8")
    (tmp_path / "manifest.txt").write_text(text)
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(str(tmp_path))
    with pytest.raises(CorruptCheckpointError):
        CheckpointManifest.from_text("entry w 4 0 16\n")
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(str(tmp_path / "missing"))


def test_failed_manifest_write_keeps_previous_checkpoint(tmp_path, monkeypatch):
    save_checkpoint({"w": torch.ones(4)}, {"iteration": 1}, str(tmp_path))
    real_write = checkpoint_module._atomic_write

    def crash_on_manifest(path, data):
        if path.endswith("manifest.txt"):
            raise OSError("disk full")
        real_write(path, data)

    monkeypatch.setattr(checkpoint_module, "_atomic_write", crash_on_manifest)
    with pytest.raises(OSError):
        save_checkpoint({"w": torch.zeros(4)}, {"iteration": 2}, str(tmp_path))
    monkeypatch.undo()

    tensors, manifest = load_checkpoint(str(tmp_path))
    assert manifest.meta == {"iteration": 1}
    assert torch.equal(tensors["w"], torch.ones(4))

    save_checkpoint({"w": torch.full((4,), 3.0)}, {"iteration": 3}, str(tmp_path))
    blobs = [name for name in os.listdir(tmp_path) if name.startswith("tensors")]
    assert blobs == [load_manifest(str(tmp_path)).data_file]
    assert load_checkpoint(str(tmp_path))[1].meta == {"iteration": 3}


def test_parameter_store_keeps_optimizer_state(tmp_path):
    param = Parameter("layer.weight", torch.arange(6.0).reshape(2, 3))
    param.adam_m = torch.full((2, 3), 0.25)
    param.adam_v = torch.full((2, 3), 0.5)
    param.step_count = 7
    save_parameters({"layer.weight": param}, str(tmp_path), meta={"genotype": "0 1 0 1"})
    params, manifest = load_parameters(str(tmp_path))
    restored = params["layer.weight"]
    assert torch.equal(restored.value.detach(), param.value.detach())
    assert torch.equal(restored.adam_m, param.adam_m) and torch.equal(restored.adam_v, param.adam_v)
    assert restored.step_count == 7
    assert manifest.meta["genotype"] == "0 1 0 1"


def test_generator_state_hex_is_stable():
    rng = torch.Generator().manual_seed(3)
    assert generator_state_hex(rng) == generator_state_hex(torch.Generator().manual_seed(3))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_missing_config_gives_defaults():
    with capture_logs() as logs:
        config = parse_config(None)
    loaded = [entry for entry in logs if entry["event"] == "[config] loaded"]
    assert len(loaded) == 1 and loaded[0]["path"] is None
    assert loaded[0]["total_iters"] == config.total_iters
    assert config == SearchConfig()
    assert config.stage_length == 4
    assert config.search_generator_steps == 12 * 2 * 20


def test_config_text_with_aliases_and_comments():
    text = "# desk run\ntotal_iters=90\nnum_cells = 3\nk=2\nm=6\nmetric=recip_fid\ndynamic_reset=false\n"
    config = parse_config_text(text)
    assert config.total_iters == 90 and config.stage_length == 30
    assert config.top_k == 2 and config.num_candidates == 6
    assert config.metric == "recip_fid" and config.dynamic_reset is False


def test_config_errors_carry_line_numbers():
    with pytest.raises(ConfigError) as info:
        parse_config_text("total_iters=12\nk=abc\n")
    assert info.value.line == 2
    with pytest.raises(ConfigError) as info:
        parse_config_text("\n\nmystery=1\n")
    assert info.value.line == 3


def test_config_validation_collects_problems():
    with pytest.raises(ConfigError) as info:
        SearchConfig(total_iters=10, num_cells=3, top_k=5, num_candidates=4).validate()
    message = str(info.value)
    assert "not divisible" in message and "K = 5" in message
    with pytest.raises(ConfigError):
        SearchConfig(base_resolution=8, resolution=32).validate()


def test_config_file_round_trip(tmp_path):
    config = SearchConfig(total_iters=6, num_cells=2, base_channels=8, seed=4)
    path = tmp_path / "config.txt"
    path.write_text(format_config(config))
    loaded = parse_config(str(path))
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)
    assert config_hash(config.with_overrides(seed=5)) != config_hash(config)


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------

def test_recorder_writes_and_restores(tmp_path):
    recorder = RunRecorder(str(tmp_path))
    recorder.event("train_shared", 0, steps=4, collapse=False)
    recorder.controller_step(iteration=0, step=0, reward=1.5)
    recorder.metrics("search", 0, "0 1 0 1", 2.0, 0.1, float("nan"), 2.0, 500)
    counts = recorder.counts()
    recorder.event("grow", 1)
    recorder.metrics("search", 1, "0 1 0 1", 2.5, 0.1, 3.0, 2.5, 500)

    fresh = RunRecorder(str(tmp_path))
    fresh.restore(counts)
    assert fresh.event_trace() == [("train_shared", 0)]
    assert len(read_json_lines(str(tmp_path / "events.jsonl"))) == 1
    metrics = read_json_lines(str(tmp_path / "metrics.jsonl"))
    assert metrics == [dict(zip(METRIC_FIELDS, ("search", 0, "0 1 0 1", 2.0, 0.1, None, 2.0, 500)))]
    csv_lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert csv_lines[0] == ",".join(METRIC_FIELDS) and len(csv_lines) == 2


def test_in_memory_recorder_writes_nothing(tmp_path):
    recorder = RunRecorder(None)
    row = recorder.event("save", 3, stage=0)
    assert row == {"event": "save", "iteration": 3, "stage": 0}
    assert json.dumps(recorder.events)
    assert os.listdir(tmp_path) == []
