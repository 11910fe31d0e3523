"""
Checkpoint and scene persistence.

Both use one versioned little-endian container:

    magic (8 bytes) | version u32 | section count u32 | sections...

and each section is

    name length u16 | name utf-8 | kind u8 | payload

where an array payload is ``dtype u8 | ndim u8 | dims u64... | raw bytes``
(float64 or int64, little-endian) and a JSON payload is ``length u64 | utf-8``.
Float payloads are stored raw, so a round trip is bit-exact.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import structlog

from core.errors import CheckpointFormatError, UnsupportedVersionError
from models.config import ExperimentConfig
from models.gaussians import GaussianCloud
from models.scene import GroundTruth, SceneData, SceneSpec, ViewSample
from services.deformation import DeformationField, FieldArchitecture

logger = structlog.get_logger(__name__)

MAGIC = b"SPLATLAB"
CONTAINER_VERSION = 1

_KIND_ARRAY = 0
_KIND_JSON = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {"f": 0, "i": 1}

CLOUD_FIELDS = ("positions", "log_scales", "opacity_logits", "colors", "depth_keys")


@dataclass
class Checkpoint:
    """Trained state of one run."""

    cloud: GaussianCloud
    field: DeformationField
    iteration: int
    rng_state: dict[str, Any]
    config: ExperimentConfig
    version: int = CONTAINER_VERSION

    @property
    def checkpoint_id(self) -> str:
        return f"{self.config.scene.name}/{self.config.preset}/{self.config.seed}@{self.iteration}"

    def same_as(self, other: "Checkpoint") -> bool:
        """Bit-exact equality of every payload."""
        return encode_checkpoint(self) == encode_checkpoint(other)


def _pack_array(name: str, value: np.ndarray) -> bytes:
    value = np.asarray(value)
    code = _DTYPE_CODES.get(value.dtype.kind)
    if code is None:
        raise CheckpointFormatError(f"cannot store {value.dtype} array {name!r}")
    data = np.ascontiguousarray(value, dtype=_DTYPES[code])
    header = struct.pack("<BBB", _KIND_ARRAY, code, data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return _pack_name(name) + header + data.tobytes()


def _pack_json(name: str, value: Any) -> bytes:
    payload = json.dumps(value, sort_keys=True).encode("utf-8")
    return _pack_name(name) + struct.pack("<BQ", _KIND_JSON, len(payload)) + payload


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_sections(sections: dict[str, Any]) -> bytes:
    """Serialize named arrays and JSON values into the container."""
    chunks = [MAGIC, struct.pack("<II", CONTAINER_VERSION, len(sections))]
    for name, value in sections.items():
        chunks.append(_pack_array(name, value) if isinstance(value, np.ndarray) else _pack_json(name, value))
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"container truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_sections(data: bytes) -> dict[str, Any]:
    """
    Parse a container.

    Raises:
        UnsupportedVersionError: version tag differs from this build's
        CheckpointFormatError: bad magic, truncation or garbled sections
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a splat lab container (bad magic)")
    version, count = reader.unpack("<II")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(version, CONTAINER_VERSION)

    sections: dict[str, Any] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError("section name is not utf-8") from e
        (kind,) = reader.unpack("<B")
        if kind == _KIND_ARRAY:
            code, ndim = reader.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointFormatError(f"unknown dtype code {code} in section {name!r}")
            shape = reader.unpack(f"<{ndim}Q")
            dtype = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            sections[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
        elif kind == _KIND_JSON:
            (length,) = reader.unpack("<Q")
            try:
                sections[name] = json.loads(reader.take(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointFormatError(f"section {name!r} holds invalid JSON") from e
        else:
            raise CheckpointFormatError(f"unknown section kind {kind} in {name!r}")
    if reader.pos != len(data):
        raise CheckpointFormatError("trailing bytes after the last section")
    return sections


def _require(sections: dict[str, Any], name: str) -> Any:
    try:
        return sections[name]
    except KeyError as e:
        raise CheckpointFormatError(f"missing section {name!r}") from e


def _cloud_sections(prefix: str, cloud: GaussianCloud) -> dict[str, np.ndarray]:
    return {f"{prefix}.{name}": getattr(cloud, name) for name in CLOUD_FIELDS}


def _cloud_from(prefix: str, sections: dict[str, Any]) -> GaussianCloud:
    return GaussianCloud(**{name: _require(sections, f"{prefix}.{name}") for name in CLOUD_FIELDS})


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    arch = ckpt.field.architecture
    return encode_sections(
        {
            **_cloud_sections("cloud", ckpt.cloud),
            "field.params": ckpt.field.params,
            "field.architecture": {
                "dim": arch.dim,
                "hidden_widths": list(arch.hidden_widths),
                "fourier_bands": arch.fourier_bands,
                "activation": arch.activation,
            },
            "iteration": ckpt.iteration,
            "rng_state": ckpt.rng_state,
            "config": ckpt.config.model_dump(mode="json"),
        }
    )


def decode_checkpoint(data: bytes) -> Checkpoint:
    sections = decode_sections(data)
    arch_data = _require(sections, "field.architecture")
    try:
        arch = FieldArchitecture(
            dim=int(arch_data["dim"]),
            hidden_widths=tuple(int(w) for w in arch_data["hidden_widths"]),
            fourier_bands=int(arch_data["fourier_bands"]),
            activation=str(arch_data["activation"]),
        )
        config = ExperimentConfig.model_validate(_require(sections, "config"))
        field = DeformationField(arch, _require(sections, "field.params"))
        cloud = _cloud_from("cloud", sections)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"checkpoint payload is inconsistent: {e}") from e
    return Checkpoint(
        cloud=cloud,
        field=field,
        iteration=int(_require(sections, "iteration")),
        rng_state=_require(sections, "rng_state"),
        config=config,
    )


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.debug("checkpoint.saved", path=str(path), count=ckpt.cloud.count, iteration=ckpt.iteration)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_roundtrip(ckpt: Checkpoint, path: Path | str) -> Checkpoint:
    """Save then load; the result equals ``ckpt`` bit-exactly."""
    return load_checkpoint(save_checkpoint(ckpt, path))


def _views_sections(prefix: str, views: list[ViewSample]) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.angles": np.array([v.angle for v in views], dtype=np.float64),
        f"{prefix}.times": np.array([v.t for v in views], dtype=np.float64),
        f"{prefix}.images": np.stack([v.image for v in views]),
    }


def _views_from(prefix: str, sections: dict[str, Any]) -> list[ViewSample]:
    angles = _require(sections, f"{prefix}.angles")
    times = _require(sections, f"{prefix}.times")
    images = _require(sections, f"{prefix}.images")
    return [ViewSample(float(a), float(t), img) for a, t, img in zip(angles, times, images)]


def dump_scene(scene: SceneData, path: Path | str) -> Path:
    """Write a generated scene (spec, ground truth, all views) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_sections(
        {
            "spec": scene.spec.model_dump(mode="json"),
            **_cloud_sections("truth", scene.truth.cloud),
            "truth.part_labels": scene.truth.part_labels.astype(np.int64),
            **_views_sections("train", scene.train),
            **_views_sections("test", scene.test),
        }
    )
    path.write_bytes(data)
    return path


def load_scene(path: Path | str) -> SceneData:
    sections = decode_sections(Path(path).read_bytes())
    try:
        spec = SceneSpec.model_validate(_require(sections, "spec"))
        truth = GroundTruth(spec=spec, cloud=_cloud_from("truth", sections), part_labels=_require(sections, "truth.part_labels"))
    except ValueError as e:
        raise CheckpointFormatError(f"scene payload is inconsistent: {e}") from e
    return SceneData(spec=spec, train=_views_from("train", sections), test=_views_from("test", sections), truth=truth)
