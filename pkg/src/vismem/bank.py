"""Scene-aware visual memory: construction, filtering, and persistence.

Each entry pairs a retrieval key (weighted mix of phrase, scene and global
image embeddings, unit-normalized) with a visual value (unit-normalized mean
of the patch features inside the grounded box). Embeddings are supplied by an
EmbeddingProvider; no model inference happens here.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError, MissingEmbeddingError
from .grids import (
    Box2D,
    as_grid,
    as_scalar_map,
    as_vector,
    l2_normalize,
    mean_pool_region,
    weighted_combine,
)
from .serial import Reader, Writer, atomic_write_bytes, read_file

# Fixed per-entry metadata stride in the bank file: category and image id as
# 64-byte zero-padded UTF-8, box as 4 f32, blur score as 1 f32.
NAME_FIELD_BYTES = 64
ENTRY_META_BYTES = 2 * NAME_FIELD_BYTES + 5 * 4

BANK_MAGIC = "PBNK"
BANK_VERSION = 1
TABLE_MAGIC = "PMEM"
TABLE_VERSION = 1


def entry_stride(d_key: int, d_val: int) -> int:
    """On-disk byte size of one bank entry."""
    return 4 * (d_key + d_val) + ENTRY_META_BYTES


@dataclass(frozen=True)
class KeyWeights:
    """Mixing weights for phrase, scene, and global image context."""

    w_p: float = 1.0
    w_s: float = 0.3
    w_g: float = 0.01

    def as_dict(self) -> dict:
        return {"w_p": self.w_p, "w_s": self.w_s, "w_g": self.w_g}


@dataclass
class GroundingRecord:
    """One grounded phrase-region annotation."""

    image_id: str
    box: Box2D
    phrase: str
    scene: str = ""
    gray_crop: np.ndarray | None = None
    blur_score: float | None = None


class EmbeddingProvider:
    """Lookup tables of precomputed embeddings and feature grids.

    The empty scene string always maps to the zero vector, so the scene term
    vanishes for images without a descriptor.
    """

    def __init__(self, text_table=None, image_table=None, feature_table=None,
                 d_key=None, d_val=None):
        self.text_table = {k: as_vector(v) for k, v in (text_table or {}).items()}
        self.image_table = {k: as_vector(v) for k, v in (image_table or {}).items()}
        self.feature_table = {k: as_grid(g) for k, g in (feature_table or {}).items()}
        self.d_key = d_key or self._infer_dim()
        self.d_val = d_val or self._infer_val_dim()

    def _infer_dim(self):
        for table in (self.text_table, self.image_table):
            for v in table.values():
                return v.shape[0]
        return None

    def _infer_val_dim(self):
        for g in self.feature_table.values():
            return g.shape[2]
        return None

    def text_embedding(self, text: str) -> np.ndarray:
        if text == "":
            if self.d_key is None:
                raise MissingEmbeddingError("key dimension unknown for empty-string embedding")
            return np.zeros(self.d_key, dtype=np.float32)
        if text not in self.text_table:
            raise MissingEmbeddingError(f"no text embedding for {text!r}")
        return self.text_table[text]

    def image_embedding(self, image_id: str) -> np.ndarray:
        if image_id not in self.image_table:
            raise MissingEmbeddingError(f"no image embedding for {image_id!r}")
        return self.image_table[image_id]

    def feature_grid(self, image_id: str) -> np.ndarray:
        if image_id not in self.feature_table:
            raise MissingEmbeddingError(f"no feature grid for {image_id!r}")
        return self.feature_table[image_id]


class HashingProvider(EmbeddingProvider):
    """Deterministic synthetic embedder: hashes strings to seeded unit vectors.

    Enables end-to-end runs and tests without any ML runtime. Feature grids
    must still be registered explicitly.
    """

    def __init__(self, d_key: int, d_val: int, seed: int = 0, feature_table=None):
        super().__init__(feature_table=feature_table, d_key=d_key, d_val=d_val)
        self.seed = seed

    def _hash_vector(self, kind: str, name: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.seed}|{kind}|{name}".encode("utf-8"), digest_size=8
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
        return l2_normalize(rng.standard_normal(self.d_key).astype(np.float32))

    def text_embedding(self, text: str) -> np.ndarray:
        if text == "":
            return np.zeros(self.d_key, dtype=np.float32)
        return self._hash_vector("text", text)

    def image_embedding(self, image_id: str) -> np.ndarray:
        return self._hash_vector("image", image_id)


@dataclass(eq=False)
class MemoryEntry:
    """One memory slot: unit-norm retrieval key + unit-norm visual value."""

    key: np.ndarray
    value: np.ndarray
    category: str
    image_id: str
    box: Box2D
    blur_score: float | None = None

    def __eq__(self, other):
        if not isinstance(other, MemoryEntry):
            return NotImplemented
        blur_equal = (
            (self.blur_score is None and other.blur_score is None)
            or (self.blur_score is not None and other.blur_score is not None
                and float(np.float32(self.blur_score)) == float(np.float32(other.blur_score)))
        )
        return (
            np.array_equal(self.key, other.key)
            and np.array_equal(self.value, other.value)
            and self.category == other.category
            and self.image_id == other.image_id
            and self.box == other.box
            and blur_equal
        )


@dataclass(eq=False)
class MemoryBank:
    """Immutable ordered collection of memory entries. Entry ids are positions."""

    entries: list[MemoryEntry]
    d_key: int
    d_val: int
    weights: KeyWeights = field(default_factory=KeyWeights)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def keys_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.d_key), dtype=np.float32)
        return np.stack([e.key for e in self.entries])

    def values_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.d_val), dtype=np.float32)
        return np.stack([e.value for e in self.entries])

    def entry_ids_for_image(self, image_id: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.image_id == image_id]

    def view_excluding(self, image_id: str) -> list[tuple[int, MemoryEntry]]:
        """Self-exclusion view: (original id, entry) pairs skipping one image."""
        return [(i, e) for i, e in enumerate(self.entries) if e.image_id != image_id]

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self.d_key == other.d_key
            and self.d_val == other.d_val
            and self.weights == other.weights
            and self.manifest == other.manifest
            and self.entries == other.entries
        )


def build_key(phrase_emb, scene_emb, image_emb, weights: KeyWeights) -> np.ndarray:
    """Normalized weighted mix of phrase, scene, and image embeddings."""
    combined = weighted_combine(
        [phrase_emb, scene_emb, image_emb], [weights.w_p, weights.w_s, weights.w_g]
    )
    return l2_normalize(combined)


def build_value(provider: EmbeddingProvider, image_id: str, box: Box2D) -> np.ndarray:
    """Normalized mean of the patch features inside the box."""
    grid = provider.feature_grid(image_id)
    return l2_normalize(mean_pool_region(grid, box))


def filter_small_boxes(records: list[GroundingRecord], min_area: float) -> list[GroundingRecord]:
    """Drop records whose normalized box area is below min_area."""
    if min_area < 0:
        raise InvalidInputError(f"min_area must be >= 0, got {min_area}")
    return [r for r in records if r.box.area >= min_area]


def laplacian_variance(gray) -> float:
    """Blur score: population variance of the 4-neighbor Laplacian response.

    Valid-region convolution only (no padding), so the crop must be at
    least 3x3.
    """
    gray = as_scalar_map(gray).astype(np.float64)
    h, w = gray.shape
    if h < 3 or w < 3:
        raise InvalidInputError(f"crop must be at least 3x3, got {h}x{w}")
    lap = (
        gray[:-2, 1:-1] + gray[2:, 1:-1] + gray[1:-1, :-2] + gray[1:-1, 2:]
        - 4.0 * gray[1:-1, 1:-1]
    )
    return float(lap.var())


def merge_duplicates(records: list[GroundingRecord], iou_threshold: float) -> list[GroundingRecord]:
    """Keep the first of any same-image, same-phrase group with IoU >= threshold."""
    if not (0.0 < iou_threshold <= 1.0):
        raise InvalidInputError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    kept: list[GroundingRecord] = []
    kept_by_group: dict[tuple[str, str], list[Box2D]] = {}
    for rec in records:
        group = (rec.image_id, rec.phrase)
        boxes = kept_by_group.setdefault(group, [])
        if any(rec.box.iou(b) >= iou_threshold for b in boxes):
            continue
        boxes.append(rec.box)
        kept.append(rec)
    return kept


def blur_filter(records: list[GroundingRecord], scores: list[float],
                drop_fraction: float) -> list[GroundingRecord]:
    """Drop the floor(drop_fraction * N) lowest-scoring records.

    Ties at the cutoff are broken by dropping the lower record index first.
    """
    if not (0.0 <= drop_fraction < 1.0):
        raise InvalidInputError(f"drop_fraction must be in [0, 1), got {drop_fraction}")
    if len(records) != len(scores):
        raise InvalidInputError("records and scores must have equal length")
    n_drop = math.floor(drop_fraction * len(records))
    if n_drop == 0:
        return list(records)
    order = sorted(range(len(records)), key=lambda i: (scores[i], i))
    dropped = set(order[:n_drop])
    return [r for i, r in enumerate(records) if i not in dropped]


@dataclass
class BankBuildConfig:
    """Filter and mixing settings for bank construction."""

    weights: KeyWeights = field(default_factory=KeyWeights)
    min_area: float = 1e-4
    iou_threshold: float = 0.9
    drop_fraction: float = 0.10
    exclude_images: frozenset = frozenset()


def _record_blur_score(rec: GroundingRecord) -> float:
    if rec.blur_score is not None:
        return float(rec.blur_score)
    if rec.gray_crop is not None:
        return laplacian_variance(rec.gray_crop)
    raise InvalidInputError(
        f"record (image {rec.image_id!r}, phrase {rec.phrase!r}) has neither "
        "a blur score nor a grayscale crop; blur filtering needs one"
    )


def build_bank(records: list[GroundingRecord], provider: EmbeddingProvider,
               config: BankBuildConfig | None = None) -> MemoryBank:
    """Run the construction pipeline: exclusion -> small-box filter ->
    duplicate merge -> blur filter -> key/value embedding.
    """
    config = config or BankBuildConfig()
    input_count = len(records)

    stage = [r for r in records if r.image_id not in config.exclude_images]
    removed_excluded = input_count - len(stage)

    after_small = filter_small_boxes(stage, config.min_area)
    removed_small = len(stage) - len(after_small)

    after_merge = merge_duplicates(after_small, config.iou_threshold)
    removed_merge = len(after_small) - len(after_merge)

    if config.drop_fraction > 0 and after_merge:
        scores = [_record_blur_score(r) for r in after_merge]
        survivors = blur_filter(after_merge, scores, config.drop_fraction)
    else:
        survivors = after_merge
    removed_blur = len(after_merge) - len(survivors)

    entries = []
    for rec in survivors:
        try:
            key = build_key(
                provider.text_embedding(rec.phrase),
                provider.text_embedding(rec.scene),
                provider.image_embedding(rec.image_id),
                config.weights,
            )
            value = build_value(provider, rec.image_id, rec.box)
        except MissingEmbeddingError as exc:
            raise MissingEmbeddingError(
                f"record (image {rec.image_id!r}, phrase {rec.phrase!r}): {exc}"
            ) from exc
        entries.append(MemoryEntry(
            key=key, value=value, category=rec.phrase,
            image_id=rec.image_id, box=rec.box,
            blur_score=rec.blur_score if rec.blur_score is not None else None,
        ))

    d_key = provider.d_key if provider.d_key else (entries[0].key.shape[0] if entries else 0)
    d_val = provider.d_val if provider.d_val else (entries[0].value.shape[0] if entries else 0)
    manifest = {
        "input_count": input_count,
        "removed_excluded": removed_excluded,
        "removed_small": removed_small,
        "removed_merge": removed_merge,
        "removed_blur": removed_blur,
        "output_count": len(entries),
        "min_area": config.min_area,
        "iou_threshold": config.iou_threshold,
        "drop_fraction": config.drop_fraction,
    }
    return MemoryBank(entries=entries, d_key=d_key, d_val=d_val,
                      weights=config.weights, manifest=manifest)


# --- persistence -----------------------------------------------------------

def save_bank(bank: MemoryBank, path) -> None:
    w = Writer()
    w.magic(BANK_MAGIC).u32(BANK_VERSION)
    w.u32(bank.d_key).u32(bank.d_val).u64(len(bank.entries))
    w.json_block({"weights": bank.weights.as_dict(), "manifest": bank.manifest})
    for e in bank.entries:
        w.f32_array(e.key)
        w.f32_array(e.value)
        w.fixed_string(e.category, NAME_FIELD_BYTES)
        w.fixed_string(e.image_id, NAME_FIELD_BYTES)
        w.f32_array(np.asarray(e.box.as_list(), dtype=np.float32))
        w.f32(math.nan if e.blur_score is None else float(e.blur_score))
    atomic_write_bytes(path, w.getvalue())


def load_bank(path) -> MemoryBank:
    r = Reader(read_file(path))
    r.magic(BANK_MAGIC)
    version = r.u32()
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}", offset=4)
    d_key = r.u32()
    d_val = r.u32()
    count = r.u64()
    meta = r.json_block()
    weights = KeyWeights(**meta["weights"])
    entries = []
    for _ in range(count):
        key = r.f32_array(d_key)
        value = r.f32_array(d_val)
        category = r.fixed_string(NAME_FIELD_BYTES)
        image_id = r.fixed_string(NAME_FIELD_BYTES)
        bx = r.f32_array(4)
        blur = r.f32()
        entries.append(MemoryEntry(
            key=key, value=value, category=category, image_id=image_id,
            box=Box2D(float(bx[0]), float(bx[1]), float(bx[2]), float(bx[3])),
            blur_score=None if math.isnan(blur) else float(blur),
        ))
    r.expect_eof()
    return MemoryBank(entries=entries, d_key=d_key, d_val=d_val,
                      weights=weights, manifest=meta["manifest"])


def save_embedding_table(table: dict[str, np.ndarray], path) -> None:
    """Write a named-vector table: PMEM magic, version, dim, count, entries."""
    vecs = {name: as_vector(v) for name, v in table.items()}
    dims = {v.shape[0] for v in vecs.values()}
    if len(dims) > 1:
        raise InvalidInputError(f"mixed dimensions in table: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    w = Writer()
    w.magic(TABLE_MAGIC).u32(TABLE_VERSION).u32(dim).u64(len(vecs))
    for name, vec in vecs.items():
        encoded = name.encode("utf-8")
        w.u32(len(encoded)).raw(encoded).f32_array(vec)
    atomic_write_bytes(path, w.getvalue())


def load_embedding_table(path) -> dict[str, np.ndarray]:
    r = Reader(read_file(path))
    r.magic(TABLE_MAGIC)
    version = r.u32()
    if version != TABLE_VERSION:
        raise FormatError(f"unsupported table version {version}", offset=4)
    dim = r.u32()
    count = r.u64()
    table = {}
    for _ in range(count):
        name_len = r.u32()
        start = r.offset
        try:
            name = r._take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"bad UTF-8 name: {exc}", offset=start) from exc
        table[name] = r.f32_array(dim)
    r.expect_eof()
    return table


def load_grounding_records(path) -> list[GroundingRecord]:
    """Read line-delimited JSON grounding records.

    Each line: {image_id, box: [x0,y0,x1,y1], phrase, scene?, blur_score?,
    gray_crop?: path to an 8-bit binary PGM, relative to the records file}.
    """
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad JSON on line {line_no}: {exc}") from exc
            missing = [k for k in ("image_id", "box", "phrase") if k not in obj]
            if missing:
                raise FormatError(
                    f"line {line_no}: missing required field(s) {missing}")
            box = obj["box"]
            if not isinstance(box, list) or len(box) != 4:
                raise FormatError(f"line {line_no}: box must be [x0, y0, x1, y1]")
            gray = None
            if obj.get("gray_crop"):
                gray = read_pgm(os.path.join(base, obj["gray_crop"]))
            records.append(GroundingRecord(
                image_id=obj["image_id"],
                box=Box2D(*[float(v) for v in box]),
                phrase=obj["phrase"],
                scene=obj.get("scene", ""),
                gray_crop=gray,
                blur_score=obj.get("blur_score"),
            ))
    return records


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a float32 (H, W) map of 0..255."""
    data = read_file(path)
    parts = []
    idx = 0
    while len(parts) < 4:
        while idx < len(data) and data[idx : idx + 1].isspace():
            idx += 1
        if idx < len(data) and data[idx : idx + 1] == b"#":
            while idx < len(data) and data[idx : idx + 1] != b"\n":
                idx += 1
            continue
        start = idx
        while idx < len(data) and not data[idx : idx + 1].isspace():
            idx += 1
        if start == idx:
            raise FormatError("truncated PGM header", offset=start)
        parts.append(data[start:idx])
    if parts[0] != b"P5":
        raise FormatError(f"not a binary PGM: {parts[0]!r}", offset=0)
    width, height, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise FormatError("only 8-bit PGM supported")
    idx += 1  # single whitespace after maxval
    pixels = data[idx : idx + width * height]
    if len(pixels) < width * height:
        raise FormatError("truncated PGM pixel data", offset=idx)
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).astype(np.float32)


def write_pgm(scalar_map, path) -> None:
    """Write a float map (any range) as an 8-bit binary PGM, min-max scaled."""
    arr = as_scalar_map(scalar_map).astype(np.float64)
    lo, hi = arr.min(), arr.max()
    scaled = np.zeros_like(arr) if hi - lo <= 0 else (arr - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())
