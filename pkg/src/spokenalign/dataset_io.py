"""Bit-exact tensor files, parameter collections and the JSON-lines manifest.

Tensor file layout (all little-endian)::

    offset 0   4 bytes   magic b"MMTF"
    offset 4   1 byte    version, always 1
    offset 5   1 byte    dtype: 0 = float32, 1 = float64
    offset 6   2 bytes   rank (uint16)
    offset 8   4*rank    dims (uint32 each)
    then       payload   row-major values
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ShapeError
from .records import REGIONS_PER_IMAGE, CaptionRecord, ImageRecord

MAGIC = b"MMTF"
VERSION = 1
SCHEMA_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_MAX_DIM = 2 ** 32 - 1


def encode_tensor(array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"unsupported dtype {array.dtype}; only float32 and float64 are stored")
    if array.ndim < 1:
        raise ShapeError("tensors have rank >= 1")
    if array.ndim > 0xFFFF:
        raise FormatError(f"rank {array.ndim} does not fit the 16-bit rank field")
    if any(d < 1 or d > _MAX_DIM for d in array.shape):
        raise ShapeError(f"every extent must lie in [1, 2^32 - 1], got {array.shape}")
    code = _CODES[array.dtype]
    header = MAGIC + struct.pack("<BBH", VERSION, code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf):
    buf = memoryview(buf).cast("B")
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", offset=0)
    if len(buf) < 8:
        raise FormatError("truncated header", offset=len(buf))
    version, code, rank = struct.unpack_from("<BBH", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    if rank < 1:
        raise FormatError("rank must be >= 1", offset=6)
    dims_end = 8 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError(f"truncated dims: need {dims_end} header bytes, have {len(buf)}", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    for i, d in enumerate(dims):
        if d < 1:
            raise FormatError(f"dim {i} is zero", offset=8 + 4 * i)
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.itemsize
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {payload}", offset=len(buf))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", offset=dims_end + expected)
    values = np.frombuffer(buf[dims_end:], dtype=dtype).reshape(dims)
    return values.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, tensor):
    Path(path).write_bytes(encode_tensor(tensor))


def read_tensor(path):
    try:
        return decode_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- named tensor collections --------------------------------------------------

def write_params(directory, tensors, header):
    """Store ``tensors`` as ``<name>.mmtf`` files next to ``header.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(header)
    meta["tensors"] = sorted(tensors)
    for name in meta["tensors"]:
        write_tensor(directory / f"{name}.mmtf", tensors[name])
    (directory / "header.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_params(directory):
    directory = Path(directory)
    try:
        header = json.loads((directory / "header.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{directory}: missing header.json") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{directory / 'header.json'}: {exc}") from exc
    tensors = {name: read_tensor(directory / f"{name}.mmtf") for name in header.get("tensors", [])}
    return tensors, header


# -- manifest ----------------------------------------------------------------

def _dump_line(record):
    return json.dumps(record, sort_keys=True) + "\n"


def write_dataset(directory, images, captions, manifest_name="manifest.jsonl", tensor_dir="tensors"):
    """Write tensors plus a manifest, one line per image with its captions.

    Captions are grouped under their image in input order. Returns the
    manifest path.
    """
    directory = Path(directory)
    tdir = directory / tensor_dir
    tdir.mkdir(parents=True, exist_ok=True)
    by_image = {img.image_id: [] for img in images}
    for cap in captions:
        if cap.image_id not in by_image:
            raise DataError(f"caption {cap.caption_id} refers to unknown image {cap.image_id}")
        by_image[cap.image_id].append(cap)

    lines = [_dump_line({"schema": SCHEMA_VERSION})]
    for img in images:
        region_rel = f"{tensor_dir}/{img.image_id}.regions.mmtf"
        write_tensor(directory / region_rel, img.regions)
        entry = {"image_id": img.image_id, "region_tensor_path": region_rel, "captions": []}
        if img.region_boxes is not None:
            entry["region_boxes"] = np.asarray(img.region_boxes, dtype=float).tolist()
        for cap in by_image[img.image_id]:
            centry = {"caption_id": cap.caption_id}
            if cap.words is not None:
                rel = f"{tensor_dir}/{cap.caption_id}.words.mmtf"
                write_tensor(directory / rel, cap.words)
                centry["word_tensor_path"] = rel
            else:
                paths = []
                for j, spec in enumerate(cap.spectrograms):
                    rel = f"{tensor_dir}/{cap.caption_id}.w{j:03d}.mmtf"
                    write_tensor(directory / rel, spec)
                    paths.append(rel)
                centry["spectrogram_paths"] = paths
            if cap.word_texts is not None:
                centry["word_texts"] = list(cap.word_texts)
            entry["captions"].append(centry)
        lines.append(_dump_line(entry))
    path = directory / manifest_name
    path.write_text("".join(lines))
    return path


def write_manifest(path, entries):
    """Write pre-built manifest entries (paths relative to the manifest)."""
    Path(path).write_text("".join([_dump_line({"schema": SCHEMA_VERSION})] + [_dump_line(e) for e in entries]))


def _load_tensor(base, rel, lineno, what):
    path = base / rel
    if not path.is_file():
        raise DataError(f"manifest line {lineno}: {what} file {rel} does not exist")
    try:
        return read_tensor(path)
    except FormatError as exc:
        raise DataError(f"manifest line {lineno}: {what}: {exc}") from exc


def load_dataset(manifest_path, regions_per_image=REGIONS_PER_IMAGE):
    """Materialize every image and caption in manifest order.

    Paths inside the manifest are relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    images, captions = [], []
    seen_images, seen_captions = set(), set()
    d_image = d_word = None
    try:
        text = manifest_path.read_text()
    except FileNotFoundError as exc:
        raise DataError(f"manifest {manifest_path} does not exist") from exc

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from exc
        if "schema" in entry:
            if lineno != 1 or entry["schema"] != SCHEMA_VERSION:
                raise DataError(f"manifest line {lineno}: unsupported schema header {entry}")
            continue
        try:
            image_id = str(entry["image_id"])
            region_rel = entry["region_tensor_path"]
            cap_entries = entry.get("captions", [])
        except KeyError as exc:
            raise DataError(f"manifest line {lineno}: missing key {exc}") from exc
        if image_id in seen_images:
            raise DataError(f"manifest line {lineno}: duplicate image_id {image_id}")
        seen_images.add(image_id)

        regions = _load_tensor(base, region_rel, lineno, "region tensor")
        if regions.ndim != 2 or regions.shape[0] != regions_per_image:
            raise DataError(f"manifest line {lineno}: region tensor {region_rel} has shape {regions.shape}; "
                            f"expected first dim {regions_per_image}")
        if d_image is None:
            d_image = regions.shape[1]
        elif regions.shape[1] != d_image:
            raise DataError(f"manifest line {lineno}: region dim {regions.shape[1]} differs from {d_image}")
        boxes = entry.get("region_boxes")
        images.append(ImageRecord(image_id, regions.astype(np.float64),
                                  None if boxes is None else np.asarray(boxes, dtype=np.float64)))

        for centry in cap_entries:
            caption_id = str(centry.get("caption_id", ""))
            if not caption_id:
                raise DataError(f"manifest line {lineno}: caption without caption_id")
            if caption_id in seen_captions:
                raise DataError(f"manifest line {lineno}: duplicate caption_id {caption_id}")
            seen_captions.add(caption_id)
            texts = centry.get("word_texts")
            if "word_tensor_path" in centry:
                words = _load_tensor(base, centry["word_tensor_path"], lineno, f"caption {caption_id} words")
                if words.ndim != 2:
                    raise DataError(f"manifest line {lineno}: caption {caption_id} word tensor must be N_w x d_W, "
                                    f"got {words.shape}")
                if d_word is None:
                    d_word = words.shape[1]
                elif words.shape[1] != d_word:
                    raise DataError(f"manifest line {lineno}: caption {caption_id} word dim {words.shape[1]} "
                                    f"differs from {d_word}")
                cap = CaptionRecord(caption_id, image_id, words=words.astype(np.float64), word_texts=texts)
            elif "spectrogram_paths" in centry:
                specs = []
                for rel in centry["spectrogram_paths"]:
                    spec = _load_tensor(base, rel, lineno, f"caption {caption_id} spectrogram")
                    if spec.shape != (40, 100):
                        raise DataError(f"manifest line {lineno}: spectrogram {rel} has shape {spec.shape}, "
                                        "expected (40, 100)")
                    specs.append(spec)
                if not specs:
                    raise DataError(f"manifest line {lineno}: caption {caption_id} has no words")
                cap = CaptionRecord(caption_id, image_id, spectrograms=np.stack(specs).astype(np.float64),
                                    word_texts=texts)
            else:
                raise DataError(f"manifest line {lineno}: caption {caption_id} needs word_tensor_path "
                                "or spectrogram_paths")
            if texts is not None and len(texts) != cap.n_words:
                raise DataError(f"manifest line {lineno}: caption {caption_id} has {cap.n_words} words "
                                f"but {len(texts)} word_texts")
            captions.append(cap)
    return images, captions


def relpath(path, start):
    return os.path.relpath(path, start).replace(os.sep, "/")
