"""
File formats.

Weight container layout:
- Bytes 0-7: header length H, unsigned little-endian
- Bytes 8..8+H: UTF-8 JSON header, {name: {"shape": [...], "offset": o, "length": n}}
- Bytes 8+H..: payload of little-endian float32; a tensor occupies
  payload[o : o + 4n], with o relative to the start of the payload

Images are binary PGM (P5) or PPM (P6) with 8-bit samples. Heatmaps are
written as a P5 image (values scaled to 0-255, round half up) next to a CSV
of the raw floats printed with 9 significant digits.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import FormatError
from .evaluation import LabeledSample
from .models import ModelConfig, WeightStore

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HEADER_PREFIX = 8
IMAGE_MAGICS = (b"P5", b"P6")
CSV_FORMAT = "%.9g"


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def save_weights(path: PathLike, weights: Mapping[str, np.ndarray]) -> None:
    """Write tensors contiguously in iteration order."""
    header: Dict[str, Dict] = {}
    chunks: List[bytes] = []
    offset = 0
    for name, tensor in weights.items():
        data = np.ascontiguousarray(tensor, dtype="<f4")
        header[name] = {"shape": list(data.shape), "offset": offset, "length": int(data.size)}
        chunks.append(data.tobytes())
        offset += len(chunks[-1])
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(
        len(header_bytes).to_bytes(HEADER_PREFIX, "little") + header_bytes + b"".join(chunks)
    )


def _entry(name: str, entry, position: int) -> Tuple[Tuple[int, ...], int, int]:
    if not isinstance(entry, dict) or set(entry) != {"shape", "offset", "length"}:
        raise FormatError("header entry needs exactly shape, offset, length", position, name)
    shape, offset, length = entry["shape"], entry["offset"], entry["length"]
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0 for s in shape)
    ):
        raise FormatError(f"invalid shape {shape!r}", position, name)
    for label, value in (("offset", offset), ("length", length)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise FormatError(f"invalid {label} {value!r}", position, name)
    if length != int(np.prod(shape)):
        raise FormatError(f"length {length} != product of shape {shape}", position, name)
    return tuple(shape), offset, length


def load_weights(path: PathLike, cfg: Optional[ModelConfig] = None) -> WeightStore:
    """
    Read a weight container.

    Args:
        path: Container file
        cfg: When given, names and shapes are validated against this model

    Raises:
        FormatError: Malformed header, overlapping or truncated tensor data
        WeightError: Missing, unknown or misshapen tensors for cfg
    """
    data = Path(path).read_bytes()
    if len(data) < HEADER_PREFIX:
        raise FormatError("file too short for the header length prefix", len(data))
    header_len = int.from_bytes(data[:HEADER_PREFIX], "little")
    payload_start = HEADER_PREFIX + header_len
    if payload_start > len(data):
        raise FormatError(f"header length {header_len} runs past end of file", HEADER_PREFIX)
    try:
        header = json.loads(data[HEADER_PREFIX:payload_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"malformed header: {e}", HEADER_PREFIX) from e
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object", HEADER_PREFIX)

    payload_len = len(data) - payload_start
    spans = []
    for name, raw in header.items():
        shape, offset, length = _entry(name, raw, HEADER_PREFIX)
        end = offset + 4 * length
        if end > payload_len:
            raise FormatError(
                f"tensor data truncated (needs {end} payload bytes, found {payload_len})",
                len(data),
                name,
            )
        spans.append((offset, end, name, shape))

    spans.sort()
    for (_, prev_end, prev_name, _), (start, _, name, _) in zip(spans, spans[1:]):
        if start < prev_end:
            raise FormatError(f"overlaps '{prev_name}'", payload_start + start, name)

    tensors = {}
    for offset, end, name, shape in spans:
        raw_bytes = data[payload_start + offset : payload_start + end]
        tensors[name] = np.frombuffer(raw_bytes, dtype="<f4").astype(np.float32).reshape(shape)
    store = WeightStore({name: tensors[name] for name in header})
    if cfg is not None:
        store.validate(cfg)
    logger.info("loaded %d tensors from %s", len(store), path)
    return store


# ---------------------------------------------------------------------------
# Configs and summaries
# ---------------------------------------------------------------------------


def save_config(path: PathLike, cfg: ModelConfig) -> None:
    write_json(path, cfg.to_dict())


def load_config(path: PathLike) -> ModelConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed config JSON: {e}", e.pos) from e
    if not isinstance(data, dict):
        raise FormatError("config is not a JSON object", 0)
    return ModelConfig.from_dict(data)


def write_json(path: PathLike, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: PathLike, rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> None:
    """Tabular metrics; floats printed with 6 decimals."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [f"{row[c]:.6f}" if isinstance(row[c], float) else row[c] for c in columns]
            )


# ---------------------------------------------------------------------------
# Images and heatmaps
# ---------------------------------------------------------------------------


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Scale [0, 1] floats to 0-255, rounding half up."""
    scaled = np.floor(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5)
    return scaled.astype(np.uint8)


def load_image(path: PathLike) -> np.ndarray:
    """
    Read a P5 or P6 image.

    Returns:
        float32 array of shape (H, W, C) with samples divided by 255
    """
    raw = Path(path).read_bytes()
    if raw[:2] not in IMAGE_MAGICS:
        raise FormatError(f"unsupported magic number {raw[:2]!r} in {path}", 0)
    try:
        with Image.open(io.BytesIO(raw)) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise FormatError(f"unsupported sample format ({img.mode}) in {path}", 0)
            pixels = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    except (OSError, SyntaxError, ValueError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"cannot decode {path}: {e}", 0) from e
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def save_image(path: PathLike, image: np.ndarray) -> None:
    """Write (H, W) / (H, W, 1) as P5 and (H, W, 3) as P6."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    if not (image.ndim == 2 or (image.ndim == 3 and image.shape[2] == 3)):
        raise FormatError(f"cannot write image of shape {image.shape}")
    Image.fromarray(to_bytes(image)).save(path, format="PPM")


def save_heatmap(path: PathLike, pixel_map: np.ndarray) -> Tuple[Path, Path]:
    """
    Write <path>.pgm and <path>.csv.

    Returns:
        Tuple of (pgm path, csv path)
    """
    base = Path(path)
    pgm_path = base.with_suffix(".pgm")
    csv_path = base.with_suffix(".csv")
    save_image(pgm_path, pixel_map)
    save_csv_matrix(csv_path, pixel_map)
    return pgm_path, csv_path


def save_csv_matrix(path: PathLike, values: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(np.asarray(values, dtype=np.float64)), fmt=CSV_FORMAT, delimiter=",")


def load_heatmap_csv(path: PathLike) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def save_dataset(directory: PathLike, samples: Sequence[LabeledSample]) -> Path:
    """Images and masks as PGM/PPM plus manifest.json."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for index, sample in enumerate(samples):
        suffix = ".pgm" if sample.image.shape[-1] == 1 else ".ppm"
        entry = {"image": f"sample_{index:03d}{suffix}", "label": int(sample.label)}
        save_image(root / entry["image"], sample.image)
        if sample.mask is not None:
            entry["mask"] = f"sample_{index:03d}_mask.pgm"
            save_image(root / entry["mask"], sample.mask.astype(np.float32))
        entries.append(entry)
    manifest = root / "manifest.json"
    write_json(manifest, {"samples": entries})
    return manifest


def load_dataset(directory: PathLike) -> List[LabeledSample]:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"malformed manifest {manifest_path}: {e}") from e
    samples = []
    for entry in entries:
        mask = None
        if entry.get("mask"):
            mask = load_image(root / entry["mask"])[:, :, 0] > 0.5
        samples.append(
            LabeledSample(image=load_image(root / entry["image"]), label=int(entry["label"]), mask=mask)
        )
    return samples
