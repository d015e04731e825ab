# masrc/data_io.py
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from pydantic import ValidationError

from errors import DataFormatError, DegenerateInputError
from schemas import ManifestEntry, SynthConfig

logger = logging.getLogger(__name__)

# Feature file layout: magic, u32 version, u64 rows, u64 dim, rows*dim little-endian float32.
FEATURE_MAGIC = b"MSRC"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


@dataclass(frozen=True, eq=False)
class ShotSequence:
    """Per-shot entity and place features of one video plus its boundary labels."""
    video_id: str
    entity_features: np.ndarray
    place_features: np.ndarray
    labels: Optional[np.ndarray] = None
    pseudo_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        entity = _frozen(np.asarray(self.entity_features, dtype=np.float32))
        place = _frozen(np.asarray(self.place_features, dtype=np.float32))
        if entity.ndim != 2 or place.ndim != 2:
            raise DataFormatError(f"{self.video_id}: feature matrices must be 2-D.")
        if entity.shape[0] != place.shape[0] or entity.shape[0] < 1:
            raise DataFormatError(
                f"{self.video_id}: entity rows {entity.shape[0]} and place rows {place.shape[0]} must match and be >= 1.")
        for name, mat in (("entity", entity), ("place", place)):
            zero_rows = np.nonzero(~np.any(mat != 0, axis=1))[0]
            if zero_rows.size:
                raise DegenerateInputError(f"{self.video_id}: all-zero {name} feature rows {zero_rows.tolist()}.")
        object.__setattr__(self, "entity_features", entity)
        object.__setattr__(self, "place_features", place)
        object.__setattr__(self, "labels", self._checked_labels(self.labels, "labels"))
        object.__setattr__(self, "pseudo_labels", self._checked_labels(self.pseudo_labels, "pseudo_labels"))

    def _checked_labels(self, values, name: str) -> Optional[np.ndarray]:
        if values is None:
            return None
        arr = np.asarray(values, dtype=np.int8).copy()
        if arr.shape != (self.num_shots,):
            raise DataFormatError(f"{self.video_id}: {name} label length mismatch ({arr.size} vs {self.num_shots} shots).")
        if not np.isin(arr, (0, 1)).all():
            raise DataFormatError(f"{self.video_id}: {name} must be 0/1.")
        if arr[-1] != 1:
            logger.warning("%s: final shot of %s was not marked as a boundary; forcing it to 1.", self.video_id, name)
            arr[-1] = 1
        return _frozen(arr)

    @property
    def num_shots(self) -> int:
        return int(self.entity_features.shape[0])

    @property
    def dim_entity(self) -> int:
        return int(self.entity_features.shape[1])

    @property
    def dim_place(self) -> int:
        return int(self.place_features.shape[1])


@dataclass(frozen=True, eq=False)
class WindowSample:
    """A length-T slice of a video centred on shot ``center_index``."""
    center_index: int
    entity_window: np.ndarray
    place_window: np.ndarray
    label: Optional[int] = None
    pseudo_label: Optional[int] = None
    video_id: str = field(default="", compare=False)

    @property
    def window(self) -> int:
        return int(self.entity_window.shape[0])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


# --- binary feature files --------------------------------------------------

def write_feature_file(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataFormatError(f"Feature matrix must be 2-D, got shape {matrix.shape}.")
    rows, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, dim))
        f.write(matrix.tobytes())


def read_feature_header(path) -> tuple[int, int]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Missing feature file: {path}")
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"Malformed header in {path}: file shorter than {_HEADER.size} bytes.")
    magic, version, rows, dim = _HEADER.unpack(raw)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"Bad magic in {path}: expected {FEATURE_MAGIC!r}, found {magic!r}.")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"Malformed header in {path}: unsupported version {version}.")
    expected = _HEADER.size + rows * dim * 4
    actual = path.stat().st_size
    if actual != expected:
        raise DataFormatError(f"Malformed header in {path}: header declares {rows}x{dim} floats "
                              f"({expected} bytes) but the file has {actual} bytes.")
    return int(rows), int(dim)


def read_feature_file(path) -> np.ndarray:
    rows, dim = read_feature_header(path)
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        data = np.frombuffer(f.read(rows * dim * 4), dtype="<f4")
    return data.reshape(rows, dim).astype(np.float32)


# --- manifests -------------------------------------------------------------

def load_manifest(path) -> list[ManifestEntry]:
    """
    Reads a JSON-lines manifest and validates every referenced feature file.

    Feature paths are resolved relative to the manifest's directory; the returned
    descriptors carry absolute paths.
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"Missing manifest file: {path}")
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = ManifestEntry.model_validate(json.loads(line))
            except (json.JSONDecodeError, ValidationError) as e:
                raise DataFormatError(f"{path}:{line_no}: malformed manifest line: {e}") from e
            entries.append(_validated_entry(entry, path.parent))
    logger.info("Loaded manifest %s with %d videos.", path, len(entries))
    return entries


def _validated_entry(entry: ManifestEntry, root: Path) -> ManifestEntry:
    for key in ("labels", "pseudo_labels"):
        values = getattr(entry, key)
        if values is not None and len(values) != entry.num_shots:
            raise DataFormatError(f"{entry.video_id}: {key} label length mismatch "
                                  f"({len(values)} vs {entry.num_shots} shots).")
    resolved = {}
    for key, declared_dim in (("entity_path", entry.dim_entity), ("place_path", entry.dim_place)):
        feature_path = Path(getattr(entry, key))
        if not feature_path.is_absolute():
            feature_path = root / feature_path
        rows, dim = read_feature_header(feature_path)
        if rows != entry.num_shots:
            raise DataFormatError(f"{entry.video_id}: {feature_path.name} has {rows} rows, manifest says {entry.num_shots}.")
        if dim != declared_dim:
            raise DataFormatError(f"{entry.video_id}: dimension mismatch in {feature_path.name} "
                                  f"(file {dim}, manifest {declared_dim}).")
        resolved[key] = str(feature_path.resolve())
    return entry.model_copy(update=resolved)


def load_video(entry: ManifestEntry) -> ShotSequence:
    return ShotSequence(
        video_id=entry.video_id,
        entity_features=read_feature_file(entry.entity_path),
        place_features=read_feature_file(entry.place_path),
        labels=entry.labels,
        pseudo_labels=entry.pseudo_labels,
    )


def load_dataset(manifest_path) -> list[ShotSequence]:
    return [load_video(entry) for entry in load_manifest(manifest_path)]


def write_dataset(sequences: list[ShotSequence], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Writes one feature file per modality per video plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / manifest_name
    lines = []
    for seq in sequences:
        entity_name = f"{seq.video_id}.entity.msrc"
        place_name = f"{seq.video_id}.place.msrc"
        write_feature_file(out_dir / entity_name, seq.entity_features)
        write_feature_file(out_dir / place_name, seq.place_features)
        entry = ManifestEntry(
            video_id=seq.video_id,
            num_shots=seq.num_shots,
            dim_entity=seq.dim_entity,
            dim_place=seq.dim_place,
            entity_path=entity_name,
            place_path=place_name,
            labels=None if seq.labels is None else seq.labels.tolist(),
            pseudo_labels=None if seq.pseudo_labels is None else seq.pseudo_labels.tolist(),
        )
        lines.append(entry.model_dump_json(exclude_none=True))
    manifest_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest_path


# --- windows ---------------------------------------------------------------

def cut_window(seq: ShotSequence, t: int, window: int) -> WindowSample:
    """
    Rows t-T/2+1 ... t+T/2 of the video; indices outside [0, N-1] repeat the
    nearest valid shot.
    """
    if window % 2 or window < 4:
        raise ValueError(f"Window length must be even and >= 4, got {window}.")
    if not 0 <= t < seq.num_shots:
        raise ValueError(f"Shot index {t} outside [0, {seq.num_shots - 1}] for {seq.video_id}.")
    half = window // 2
    rows = np.clip(np.arange(t - half + 1, t + half + 1), 0, seq.num_shots - 1)
    return WindowSample(
        center_index=t,
        entity_window=seq.entity_features[rows],
        place_window=seq.place_features[rows],
        label=None if seq.labels is None else int(seq.labels[t]),
        pseudo_label=None if seq.pseudo_labels is None else int(seq.pseudo_labels[t]),
        video_id=seq.video_id,
    )


def iter_windows(seq: ShotSequence, window: int) -> Iterator[WindowSample]:
    for t in range(seq.num_shots):
        yield cut_window(seq, t, window)


def split_dataset(sequences: list[ShotSequence], num_val: int) -> tuple[list[ShotSequence], list[ShotSequence]]:
    if num_val <= 0:
        return list(sequences), []
    return list(sequences[:-num_val]), list(sequences[-num_val:])


# --- synthetic data --------------------------------------------------------

def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((rows, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _carryover(rng: np.random.Generator, config: SynthConfig) -> Optional[str]:
    if not (config.place_carryover or config.cast_carryover):
        return None
    u = rng.random()
    if u < config.place_carryover:
        return "place"
    if u < config.place_carryover + config.cast_carryover:
        return "cast"
    return None


def _entity_row(rng: np.random.Generator, pool: np.ndarray, seen: list[int], config: SynthConfig) -> np.ndarray:
    if seen and rng.random() < config.entity_recurrence:
        pick = seen[int(rng.integers(len(seen)))]
    else:
        pick = int(rng.integers(config.entity_pool_size))
    seen.append(pick)
    row = pool[pick]
    if config.two_shot_rate and config.entity_pool_size > 1 and rng.random() < config.two_shot_rate:
        other = int(rng.integers(config.entity_pool_size - 1))
        other += other >= pick
        seen.append(other)
        row = (pool[pick] + pool[other]) / np.linalg.norm(pool[pick] + pool[other])
    return row + config.noise * rng.standard_normal(config.dim_entity)


def _place_row(rng: np.random.Generator, centroid: np.ndarray, offset: int, config: SynthConfig) -> np.ndarray:
    wide = config.wide_every == 0 or offset % config.wide_every == 0
    row = centroid
    if not wide and config.detail_place_weight < 1.0 and config.dim_place > 1:
        # A detail shot frames its own part of the place: cos(detail, centroid) == weight.
        view = _unit_rows(rng, 1, config.dim_place)[0]
        view = view - (view @ centroid) * centroid
        view = view / np.linalg.norm(view)
        w = config.detail_place_weight
        row = w * centroid + np.sqrt(1.0 - w * w) * view
    return row + config.noise * rng.standard_normal(config.dim_place)


def synth_generate(config: SynthConfig, seed: int) -> list[ShotSequence]:
    """
    Videos with planted scene structure; a pure function of (config, seed).

    Each scene draws one unit-norm place centroid and a pool of entity
    centroids. Place features are the centroid plus noise; entity features pick
    a pooled entity (re-showing an already-seen one with probability
    ``entity_recurrence``) plus noise. The last shot of every scene is labelled 1.

    The film-grammar knobs of SynthConfig add harder structure: two-shots
    showing a pair of cast members, wide shots every ``wide_every`` shots with
    detail shots in between that only partly show the place, and scene changes
    that keep the previous place (only the cast changes) or the previous cast
    (only the place changes).
    """
    if config.scenes_per_video < 1 or config.dim_entity < 1 or config.dim_place < 1:
        raise ValueError("Synthetic config needs at least one scene and non-empty feature dimensions.")
    rng = np.random.default_rng(seed)
    videos = []
    for v in range(config.num_videos):
        entity_rows, place_rows, labels = [], [], []
        place_centroid = pool = None
        for scene in range(config.scenes_per_video):
            num_shots = int(rng.integers(config.min_shots_per_scene, config.max_shots_per_scene + 1))
            new_place = _unit_rows(rng, 1, config.dim_place)[0]
            new_pool = _unit_rows(rng, config.entity_pool_size, config.dim_entity)
            carry = _carryover(rng, config) if scene else None
            place_centroid = place_centroid if carry == "place" else new_place
            pool = pool if carry == "cast" else new_pool
            seen: list[int] = []
            for offset in range(num_shots):
                entity_rows.append(_entity_row(rng, pool, seen, config))
                place_rows.append(_place_row(rng, place_centroid, offset, config))
            labels.extend([0] * (num_shots - 1) + [1])
        labels_arr = np.asarray(labels, dtype=np.int8)
        flips = rng.random(labels_arr.size) < config.pseudo_label_flip
        pseudo = np.where(flips, 1 - labels_arr, labels_arr).astype(np.int8)
        pseudo[-1] = 1
        videos.append(ShotSequence(
            video_id=f"synth_{v:04d}",
            entity_features=np.asarray(entity_rows, dtype=np.float32),
            place_features=np.asarray(place_rows, dtype=np.float32),
            labels=labels_arr,
            pseudo_labels=pseudo,
        ))
    return videos


def boundary_rate(sequences: list[ShotSequence]) -> float:
    shots = sum(s.num_shots for s in sequences)
    boundaries = sum(int(s.labels.sum()) for s in sequences if s.labels is not None)
    return boundaries / shots if shots else 0.0
