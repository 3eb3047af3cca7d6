"""Binary file formats, dataset manifests and the synthetic task generator.

GridFile (``.grid``)::

    b"SSGR" | u32 version=1 | u32 rank | rank x u32 extents | f32 payload

MaskFile (``.mask``)::

    b"SSMK" | u32 version=1 | u32 H | u32 W | u8 class ids (0 = background)

All integers and floats are little-endian and payloads are row-major.
Checkpoints (``.ssck``) bundle named grids::

    b"SSCK" | u32 version=1 | u64 step | u32 meta_len | meta (utf-8 key=value lines)
    | u32 count | count x (u32 name_len | name | u32 group_len | group | u32 grid_len | grid)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SynthConfig
from .errors import DataIOError, FormatError, PlacementError

GRID_MAGIC = b"SSGR"
MASK_MAGIC = b"SSMK"
CKPT_MAGIC = b"SSCK"
VERSION = 1
MAX_RANK = 16
PLACEMENT_RETRIES = 200


# ----------------------------------------------------------------------------
# grids


def encode_grid(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = GRID_MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    if len(buf) < 12 or buf[:4] != GRID_MAGIC:
        raise FormatError("not a grid file (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported grid version {version}")
    if rank > MAX_RANK:
        raise FormatError(f"implausible grid rank {rank}")
    start = 12 + 4 * rank
    if len(buf) < start:
        raise FormatError("truncated grid header")
    extents = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(extents, dtype=object)) if rank else 1
    if len(buf) - start != 4 * count:
        raise FormatError(f"grid payload is {len(buf) - start} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(extents).astype(np.float32)


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from None


def _write_bytes(path, payload: bytes):
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from None


def write_grid(path, array):
    _write_bytes(path, encode_grid(array))


def read_grid(path) -> np.ndarray:
    return decode_grid(_read_bytes(path))


# ----------------------------------------------------------------------------
# masks


def encode_mask(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise FormatError("class-id mask must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() > 255):
        raise FormatError("class ids must fit in u8")
    return MASK_MAGIC + struct.pack("<III", VERSION, *ids.shape) + np.ascontiguousarray(ids, dtype=np.uint8).tobytes()


def decode_mask(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:4] != MASK_MAGIC:
        raise FormatError("not a mask file (bad magic or short header)")
    version, height, width = struct.unpack_from("<III", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported mask version {version}")
    if len(buf) - 16 != height * width:
        raise FormatError(f"mask payload is {len(buf) - 16} bytes, expected {height * width}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(height, width).copy()


def write_mask(path, ids):
    _write_bytes(path, encode_mask(ids))


def read_mask(path) -> np.ndarray:
    return decode_mask(_read_bytes(path))


# ----------------------------------------------------------------------------
# similarity export


def write_pgm(path, image01):
    """8-bit binary graymap of a [0, 1] map."""
    img = np.asarray(image01, dtype=np.float64)
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    _write_bytes(path, header + pixels.tobytes())


# ----------------------------------------------------------------------------
# masks at several resolutions


def nearest_resize(mask, shape) -> np.ndarray:
    """Nearest-neighbour resample using pixel centres (label-preserving)."""
    mask = np.asarray(mask)
    (src_h, src_w), (dst_h, dst_w) = mask.shape, shape
    rows = (2 * np.arange(dst_h) + 1) * src_h // (2 * dst_h)
    cols = (2 * np.arange(dst_w) + 1) * src_w // (2 * dst_w)
    return mask[np.ix_(rows, cols)]


@dataclass
class GroundTruthMask:
    """Binary mask of one class at native resolution plus its embedding-grid companion."""

    class_id: int
    full: np.ndarray
    coarse: np.ndarray

    @classmethod
    def from_ids(cls, ids, class_id, grid_shape):
        full = (np.asarray(ids) == class_id).astype(np.uint8)
        return cls(class_id, full, nearest_resize(full, grid_shape))

    def at(self, shape) -> np.ndarray:
        if tuple(shape) == self.full.shape:
            return self.full
        return nearest_resize(self.full, shape)


@dataclass
class Sample:
    sample_id: str
    embedding: np.ndarray  # (h, w, d) float32
    class_ids: np.ndarray  # (H, W) uint8
    masks: dict[int, GroundTruthMask] = field(default_factory=dict)

    @property
    def prompts(self) -> list[int]:
        return sorted(self.masks)


def make_sample(sample_id, embedding, class_ids) -> Sample:
    embedding = np.asarray(embedding, dtype=np.float32)
    class_ids = np.asarray(class_ids, dtype=np.uint8)
    grid = embedding.shape[:2]
    present = [int(c) for c in np.unique(class_ids) if c != 0]
    masks = {c: GroundTruthMask.from_ids(class_ids, c, grid) for c in present}
    return Sample(sample_id, embedding, class_ids, masks)


# ----------------------------------------------------------------------------
# manifests


def read_manifest(path) -> list[tuple[str, Path, Path]]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from None
    except UnicodeDecodeError:
        raise FormatError(f"manifest {path} is not UTF-8") from None
    records, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        sid, emb, mask = parts
        if sid in seen:
            raise FormatError(f"{path}:{lineno}: duplicate sample id {sid!r}")
        seen.add(sid)
        records.append((sid, path.parent / emb, path.parent / mask))
    return records


def write_manifest(path, records):
    """``records``: (sample_id, embedding_path, mask_path), paths relative to the manifest."""
    lines = ["# sample_id\tembedding\tmask"]
    lines += [f"{sid}\t{emb}\t{mask}" for sid, emb, mask in records]
    _write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_dataset(manifest, num_classes: int | None = None) -> list[Sample]:
    samples = []
    for sid, emb_path, mask_path in read_manifest(manifest):
        embedding = read_grid(emb_path)
        if embedding.ndim != 3:
            raise FormatError(f"{emb_path}: embedding must be rank 3, got {embedding.ndim}")
        ids = read_mask(mask_path)
        if num_classes is not None and ids.size and ids.max() > num_classes:
            raise FormatError(f"{mask_path}: class id {ids.max()} exceeds {num_classes}")
        samples.append(make_sample(sid, embedding, ids))
    return samples


# ----------------------------------------------------------------------------
# synthetic task


def class_signatures(rng: np.random.Generator, count: int, channels: int) -> np.ndarray:
    """``count`` signature vectors with per-channel RMS 1; orthogonal when count <= channels."""
    raw = rng.standard_normal((channels, count))
    if count <= channels:
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))  # fix the sign convention of the factorisation
        sig = q.T
    else:
        sig = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return (sig * np.sqrt(channels)).astype(np.float32)


def _place_rectangles(rng, cfg: SynthConfig) -> np.ndarray:
    label = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, cfg.num_classes + 1))
        for _attempt in range(PLACEMENT_RETRIES):
            rh = int(rng.integers(2, max(2, cfg.height // 2) + 1))
            rw = int(rng.integers(2, max(2, cfg.width // 2) + 1))
            top = int(rng.integers(0, cfg.height - rh + 1))
            left = int(rng.integers(0, cfg.width - rw + 1))
            if not label[top:top + rh, left:left + rw].any():
                label[top:top + rh, left:left + rw] = cls
                break
        else:
            raise PlacementError(f"could not place {n_shapes} non-overlapping rectangles")
    return label


def synth_sample(rng, cfg: SynthConfig, signatures) -> tuple[np.ndarray, np.ndarray]:
    """One (embedding, full-resolution class-id mask) pair."""
    label = _place_rectangles(rng, cfg)
    noise = rng.standard_normal((cfg.height, cfg.width, cfg.channels)) / cfg.snr
    embedding = (signatures[label] + noise).astype(np.float32)
    ids = np.repeat(np.repeat(label, cfg.mask_scale, axis=0), cfg.mask_scale, axis=1)
    return embedding, ids


def synth_streams(seed: int):
    """Independent generators for signatures, training and evaluation samples."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def gen_synthetic(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write ``train`` and ``eval`` splits plus manifests; returns manifest paths by split."""
    cfg.validate()
    out_dir = Path(out_dir)
    sig_rng, train_rng, eval_rng = synth_streams(cfg.seed)
    signatures = class_signatures(sig_rng, cfg.num_classes + 1, cfg.channels)
    manifests = {}
    for split, rng, count in (("train", train_rng, cfg.samples), ("eval", eval_rng, cfg.eval_samples)):
        split_dir = out_dir / split
        try:
            split_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create {split_dir}: {exc}") from None
        records = []
        for i in range(count):
            embedding, ids = synth_sample(rng, cfg, signatures)
            sid = f"{split}_{i:05d}"
            write_grid(split_dir / f"{sid}.grid", embedding)
            write_mask(split_dir / f"{sid}.mask", ids)
            records.append((sid, f"{split}/{sid}.grid", f"{split}/{sid}.mask"))
        manifests[split] = out_dir / f"{split}.tsv"
        write_manifest(manifests[split], records)
    write_grid(out_dir / "signatures.grid", signatures)
    return manifests


# ----------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(entries, step: int, meta: dict) -> bytes:
    """``entries``: iterable of (name, group, array)."""
    meta_bytes = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    entries = list(entries)
    parts = [CKPT_MAGIC, struct.pack("<IQI", VERSION, step, len(meta_bytes)), meta_bytes, struct.pack("<I", len(entries))]
    for name, group, array in entries:
        grid = encode_grid(array)
        for blob in (name.encode("utf-8"), group.encode("utf-8"), grid):
            parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Returns (entries, step, meta) with entries as (name, group, array)."""
    if len(buf) < 20 or buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, step, meta_len = struct.unpack_from("<IQI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 20
    try:
        meta_text = buf[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        entries = []
        for _ in range(count):
            blobs = []
            for _field in range(3):
                (n,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                if pos + n > len(buf):
                    raise FormatError("truncated checkpoint entry")
                blobs.append(buf[pos:pos + n])
                pos += n
            entries.append((blobs[0].decode("utf-8"), blobs[1].decode("utf-8"), decode_grid(blobs[2])))
    except (struct.error, UnicodeDecodeError):
        raise FormatError("corrupt checkpoint") from None
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    lines = [line for line in meta_text.splitlines() if line]
    if any("=" not in line for line in lines):
        raise FormatError("checkpoint metadata is not key=value")
    meta = dict(line.split("=", 1) for line in lines)
    return entries, step, meta


def write_checkpoint(path, entries, step, meta):
    _write_bytes(path, encode_checkpoint(entries, step, meta))


def read_checkpoint(path):
    return decode_checkpoint(_read_bytes(path))
