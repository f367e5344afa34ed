"""
Checkpoints
-----------

A checkpoint directory holds two files:
  - `tensors-<sha prefix>.bin`: every tensor as little-endian float32, row-major, back to back
  - `manifest.txt`: plain text, one record per line

    format autogan-checkpoint 1
    config_hash <sha256 of the effective config>
    data_file <name of the data file>
    data_sha256 <sha256 of the data file>
    rng <stream> <hex generator state>
    meta <json>
    entry <name> <shape, e.g. 64x3x3x3 or - for a scalar> <byte offset> <byte count>

Both files are written to temporaries and moved into place with os.replace,
data first. The data file name is content addressed, so replacing the
manifest is the single commit point; a crash before it leaves the previous
checkpoint intact. Data files the new manifest does not name are removed
after the commit.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import structlog
import torch

from utils.errors import CorruptCheckpointError
from utils.tensor_core import DTYPE, Parameter, ParameterStore, Tensor

log = structlog.get_logger(__name__)

FORMAT_VERSION = 1
FORMAT_TAG = "autogan-checkpoint"
DATA_FILE = "tensors.bin"
DATA_PREFIX = "tensors"
MANIFEST_FILE = "manifest.txt"
ADAM_M_SUFFIX = "#adam_m"
ADAM_V_SUFFIX = "#adam_v"


@dataclass(frozen=True)
class CheckpointEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass
class CheckpointManifest:
    entries: list[CheckpointEntry]
    config_hash: str = ""
    data_sha256: str = ""
    data_file: str = DATA_FILE
    rng_states: dict[str, str] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_text(self) -> str:
        lines = [
            f"format {FORMAT_TAG} {self.format_version}",
            f"config_hash {self.config_hash or '-'}",
            f"data_file {self.data_file}",
            f"data_sha256 {self.data_sha256}",
        ]
        lines += [f"rng {name} {state}" for name, state in sorted(self.rng_states.items())]
        lines.append("meta " + json.dumps(self.meta, sort_keys=True))
        for e in self.entries:
            shape = "x".join(str(d) for d in e.shape) or "-"
            lines.append(f"entry {e.name} {shape} {e.offset} {e.nbytes}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CheckpointManifest":
        manifest = cls(entries=[])
        seen_format = False
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            kind, _, rest = line.partition(" ")
            try:
                if kind == "format":
                    tag, version = rest.split()
                    if tag != FORMAT_TAG:
                        raise CorruptCheckpointError(f"manifest line {number}: unknown format tag '{tag}'")
                    manifest.format_version = int(version)
                    seen_format = True
                elif kind == "config_hash":
                    manifest.config_hash = "" if rest.strip() == "-" else rest.strip()
                elif kind == "data_file":
                    manifest.data_file = rest.strip()
                    if not manifest.data_file or os.path.basename(manifest.data_file) != manifest.data_file:
                        raise CorruptCheckpointError(f"manifest line {number}: bad data file name '{manifest.data_file}'")
                elif kind == "data_sha256":
                    manifest.data_sha256 = rest.strip()
                elif kind == "rng":
                    name, state = rest.split()
                    manifest.rng_states[name] = state
                elif kind == "meta":
                    manifest.meta = json.loads(rest)
                elif kind == "entry":
                    name, shape, offset, nbytes = rest.split()
                    dims = () if shape == "-" else tuple(int(d) for d in shape.split("x"))
                    manifest.entries.append(CheckpointEntry(name, dims, int(offset), int(nbytes)))
                else:
                    raise CorruptCheckpointError(f"manifest line {number}: unknown record '{kind}'")
            except (ValueError, json.JSONDecodeError) as e:
                raise CorruptCheckpointError(f"manifest line {number}: {e}") from e
        if not seen_format:
            raise CorruptCheckpointError("manifest has no format line")
        if manifest.format_version != FORMAT_VERSION:
            raise CorruptCheckpointError(f"unsupported checkpoint format version {manifest.format_version}")
        return manifest


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _remove_stale_data(directory: str, keep: str) -> None:
    for name in os.listdir(directory):
        if name != keep and name.startswith(DATA_PREFIX) and name.endswith((".bin", ".bin.tmp")):
            os.remove(os.path.join(directory, name))


def generator_state_hex(rng: torch.Generator) -> str:
    return bytes(rng.get_state().tolist()).hex()


def restore_generator(rng: torch.Generator, state_hex: str) -> torch.Generator:
    rng.set_state(torch.tensor(list(bytes.fromhex(state_hex)), dtype=torch.uint8))
    return rng


def save_checkpoint(
    tensors: Mapping[str, Tensor],
    meta: dict,
    directory: str,
    rng_states: Mapping[str, torch.Generator] | None = None,
    config_hash: str = "",
) -> CheckpointManifest:
    """Write `tensors` (name -> tensor) plus metadata; returns the manifest written."""
    for name in tensors:
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"checkpoint tensor names must be non-empty without whitespace, got '{name}'")
    os.makedirs(directory, exist_ok=True)

    entries, chunks, offset = [], [], 0
    for name, tensor in tensors.items():
        raw = tensor.detach().cpu().to(DTYPE).contiguous().numpy().astype("<f4").tobytes()
        entries.append(CheckpointEntry(name, tuple(tensor.shape), offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)

    digest = hashlib.sha256(data).hexdigest()
    manifest = CheckpointManifest(
        entries=entries,
        config_hash=config_hash,
        data_sha256=digest,
        data_file=f"{DATA_PREFIX}-{digest[:16]}.bin",
        rng_states={name: generator_state_hex(g) for name, g in (rng_states or {}).items()},
        meta=dict(meta),
    )
    _atomic_write(os.path.join(directory, manifest.data_file), data)
    _atomic_write(os.path.join(directory, MANIFEST_FILE), manifest.to_text().encode("utf-8"))
    _remove_stale_data(directory, manifest.data_file)
    log.debug("[checkpoint] saved", directory=directory, tensors=len(entries), nbytes=len(data))
    return manifest


def load_manifest(directory: str) -> CheckpointManifest:
    path = os.path.join(directory, MANIFEST_FILE)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return CheckpointManifest.from_text(f.read())
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read checkpoint manifest {path}: {e}") from e


def load_checkpoint(directory: str) -> tuple[dict[str, Tensor], CheckpointManifest]:
    """Bitwise inverse of `save_checkpoint`."""
    manifest = load_manifest(directory)
    path = os.path.join(directory, manifest.data_file)
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorruptCheckpointError(f"cannot read checkpoint data {path}: {e}") from e
    if hashlib.sha256(data).hexdigest() != manifest.data_sha256:
        raise CorruptCheckpointError(f"{path}: data hash does not match the manifest")

    tensors, expected = {}, 0
    for e in manifest.entries:
        count = int(np.prod(e.shape, dtype=np.int64)) if e.shape else 1
        if e.offset != expected or e.nbytes != 4 * count or e.offset + e.nbytes > len(data):
            raise CorruptCheckpointError(f"entry '{e.name}': offset {e.offset} / size {e.nbytes} inconsistent")
        if e.name in tensors:
            raise CorruptCheckpointError(f"duplicate entry '{e.name}'")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=e.offset).astype(np.float32)
        tensors[e.name] = torch.from_numpy(values.copy()).reshape(e.shape)
        expected = e.offset + e.nbytes
    if expected != len(data):
        raise CorruptCheckpointError(f"{path}: {len(data) - expected} trailing bytes not covered by the manifest")
    return tensors, manifest


# ---------------------------------------------------------------------------
# Parameter stores
# ---------------------------------------------------------------------------

def store_tensors(store: ParameterStore, prefix: str = "") -> tuple[dict[str, Tensor], dict[str, int]]:
    """Flatten values and Adam moments; step counts go to the manifest meta."""
    tensors, steps = {}, {}
    for name, param in store.items():
        key = prefix + name
        tensors[key] = param.value
        tensors[key + ADAM_M_SUFFIX] = param.adam_m
        tensors[key + ADAM_V_SUFFIX] = param.adam_v
        steps[key] = param.step_count
    return tensors, steps


def restore_store(tensors: Mapping[str, Tensor], steps: Mapping[str, int], prefix: str = "") -> ParameterStore:
    store = {}
    for key, value in tensors.items():
        if not key.startswith(prefix) or "#" in key:
            continue
        name = key[len(prefix):]
        try:
            store[name] = Parameter(
                name,
                value,
                adam_m=tensors[key + ADAM_M_SUFFIX].clone(),
                adam_v=tensors[key + ADAM_V_SUFFIX].clone(),
                step_count=int(steps[key]),
            )
        except KeyError as e:
            raise CorruptCheckpointError(f"parameter '{key}' is missing optimizer state {e}") from e
    return store


def save_parameters(store: ParameterStore, directory: str, meta: dict | None = None, config_hash: str = "") -> CheckpointManifest:
    tensors, steps = store_tensors(store)
    return save_checkpoint(tensors, {**(meta or {}), "steps": steps}, directory, config_hash=config_hash)


def load_parameters(directory: str) -> tuple[ParameterStore, CheckpointManifest]:
    tensors, manifest = load_checkpoint(directory)
    return restore_store(tensors, manifest.meta.get("steps", {})), manifest
