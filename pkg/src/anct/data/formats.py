"""On-disk formats: NVL1 volumes, JSON-lines manifests and stats sidecars.

NVL1 layout (little-endian)::

    bytes 0-3    b"NVL1"
    bytes 4-15   u32 M, u32 64, u32 64
    payload      M*64*64 float32, slice-major then row-major, Hounsfield units
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attributes import ATTRIBUTE_NAMES, NUM_ATTRIBUTES, RatingError, check_rating

NVL_MAGIC = b"NVL1"
LATERAL = 64
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A volume file is malformed."""


class ManifestError(ValueError):
    """A manifest entry is malformed or inconsistent."""


@dataclass
class NoduleVolume:
    id: str
    slices: np.ndarray  # (M, 64, 64) float32, HU

    def __post_init__(self):
        self.slices = np.ascontiguousarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3 or self.slices.shape[1:] != (LATERAL, LATERAL):
            raise FormatError(f"volume {self.id!r} must be (M, 64, 64), got {self.slices.shape}")
        if self.slices.shape[0] < 1:
            raise FormatError(f"volume {self.id!r} has no slices")

    @property
    def depth(self) -> int:
        return self.slices.shape[0]


@dataclass
class NoduleSample:
    """One nodule with its average ratings on the original scales.

    ``rater_ratings`` is ``(R, 9)`` with NaN where a rater skipped an attribute.
    """

    volume: NoduleVolume
    ratings: np.ndarray
    rater_ratings: np.ndarray | None = None

    def __post_init__(self):
        self.ratings = np.asarray(self.ratings, dtype=np.float64)
        if self.ratings.shape != (NUM_ATTRIBUTES,):
            raise RatingError(f"expected {NUM_ATTRIBUTES} ratings, got {self.ratings.shape}")
        for name, v in zip(ATTRIBUTE_NAMES, self.ratings):
            check_rating(name, v)
        if self.rater_ratings is not None:
            self.rater_ratings = np.asarray(self.rater_ratings, dtype=np.float64)

    @property
    def id(self) -> str:
        return self.volume.id


@dataclass
class ManifestEntry:
    id: str
    volume_path: Path
    ratings: np.ndarray
    rater_ratings: np.ndarray | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")
    stats: dict | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


# --------------------------------------------------------------------------
# NVL1


def save_volume(vol: NoduleVolume, path) -> None:
    data = vol.slices.astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(NVL_MAGIC, vol.depth, LATERAL, LATERAL))
        fh.write(data.tobytes(order="C"))


def load_volume(path, volume_id: str | None = None) -> NoduleVolume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file too short for an NVL1 header")
    magic, m, h, w = _HEADER.unpack_from(raw)
    if magic != NVL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if (h, w) != (LATERAL, LATERAL):
        raise FormatError(f"{path}: lateral size {h}x{w}, expected 64x64")
    if m < 1:
        raise FormatError(f"{path}: zero slices")
    expected = m * h * w * 4
    payload = len(raw) - _HEADER.size
    if payload != expected:
        raise FormatError(f"{path}: header claims {m} slices ({expected} bytes), payload has {payload}")
    slices = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(m, h, w)
    return NoduleVolume(volume_id if volume_id is not None else path.stem, slices.astype(np.float32))


# --------------------------------------------------------------------------
# manifests


def _ratings_vector(obj, where: str, allow_missing: bool) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ManifestError(f"{where}: ratings must be an object")
    unknown = set(obj) - set(ATTRIBUTE_NAMES)
    if unknown:
        raise ManifestError(f"{where}: unknown attributes {sorted(unknown)}")
    vec = np.full(NUM_ATTRIBUTES, np.nan)
    for i, name in enumerate(ATTRIBUTE_NAMES):
        if name not in obj or obj[name] is None:
            if not allow_missing:
                raise ManifestError(f"{where}: missing rating for {name}")
            continue
        value = obj[name]
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ManifestError(f"{where}: rating for {name} is not a number")
        try:
            check_rating(name, float(value))
        except RatingError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        vec[i] = float(value)
    return vec


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse and validate a JSON-lines manifest.

    A ``stats.json`` sidecar next to the manifest, when present, fills
    ``stats``.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ManifestError(f"{where}: entry must be an object")
        nid = obj.get("id")
        if not isinstance(nid, str) or not nid:
            raise ManifestError(f"{where}: missing or empty id")
        where = f"{where} (id {nid!r})"
        if nid in seen:
            raise ManifestError(f"{where}: duplicate id {nid!r}")
        seen.add(nid)
        vol = obj.get("volume")
        if not isinstance(vol, str):
            raise ManifestError(f"{where}: missing volume path")
        vpath = root / vol
        if check_paths and not vpath.is_file():
            raise ManifestError(f"{where}: volume file not found: {vpath}")
        ratings = _ratings_vector(obj.get("ratings"), where, allow_missing=False)
        raters = None
        if obj.get("raters") is not None:
            if not isinstance(obj["raters"], list) or not obj["raters"]:
                raise ManifestError(f"{where}: raters must be a non-empty list")
            raters = np.stack(
                [_ratings_vector(r, f"{where} rater {k}", allow_missing=True) for k, r in enumerate(obj["raters"])]
            )
            with np.errstate(invalid="ignore"):
                mean = np.nanmean(raters, axis=0)
            rated = ~np.all(np.isnan(raters), axis=0)
            if np.any(np.abs(mean[rated] - ratings[rated]) > 1e-9):
                raise ManifestError(f"{where}: ratings are not the mean of the rater ratings")
        entries.append(ManifestEntry(nid, vpath, ratings, raters))
    stats = None
    stats_path = root / "stats.json"
    if stats_path.is_file():
        stats = load_stats(stats_path)
    return DatasetManifest(entries, root, stats)


def _ratings_obj(vec: np.ndarray) -> dict:
    return {n: float(v) for n, v in zip(ATTRIBUTE_NAMES, vec) if not math.isnan(v)}


def write_manifest(samples, directory, volume_dir: str = "volumes", name: str = "manifest.jsonl") -> Path:
    """Write NVL1 volumes and a manifest for ``samples`` under ``directory``."""
    directory = Path(directory)
    (directory / volume_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"{volume_dir}/{s.id}.nvl"
        save_volume(s.volume, directory / rel)
        obj = {"id": s.id, "volume": rel, "ratings": _ratings_obj(s.ratings)}
        if s.rater_ratings is not None:
            obj["raters"] = [_ratings_obj(r) for r in s.rater_ratings]
        lines.append(json.dumps(obj))
    out = directory / name
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return out


def load_samples(manifest: DatasetManifest) -> list[NoduleSample]:
    return [
        NoduleSample(load_volume(e.volume_path, e.id), e.ratings, e.rater_ratings)
        for e in manifest.entries
    ]


def load_dataset(path) -> list[NoduleSample]:
    return load_samples(load_manifest(path))


def save_stats(stats: dict, path) -> None:
    Path(path).write_text(json.dumps({"mean": float(stats["mean"]), "std": float(stats["std"])}), encoding="utf-8")


def load_stats(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return {"mean": float(obj["mean"]), "std": float(obj["std"])}
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed stats file ({exc})") from None
