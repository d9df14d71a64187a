"""On-disk formats, dataset loading and synthetic data with planted moments.

Formats (little-endian throughout):

* feature file (``.tgaf``): magic ``TGAF``, u32 version, u32 num_units,
  u32 feature_dim, then row-major float32 values.
* checkpoint (``.tgac``): magic ``TGAC``, u32 version, u32 tensor count, then
  per tensor: u16 name length, UTF-8 name, u8 rank, u32 per dim, float32 data.
* ``manifest.json`` / ``vocab.json``: UTF-8 JSON.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"TGAF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"TGAC"
CHECKPOINT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Any problem with input data or files (CLI exit code 2)."""


class FormatError(DataError):
    pass


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass


class IntegrityError(DataError):
    pass


class ConfigError(DataError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VideoFeatures:
    video_id: str
    units: np.ndarray
    unit_duration_frames: int = 16

    def __post_init__(self):
        units = np.asarray(self.units)
        if units.ndim != 2 or units.shape[0] < 1 or units.shape[1] < 1:
            raise FormatError(f"video {self.video_id!r}: features must be a non-empty 2-D matrix, got {units.shape}")
        if not np.all(np.isfinite(units)):
            raise FormatError(f"video {self.video_id!r}: non-finite feature values")
        if self.unit_duration_frames < 1:
            raise FormatError(f"video {self.video_id!r}: unit_duration_frames must be positive")
        units.setflags(write=False)
        object.__setattr__(self, "units", units)

    @property
    def num_units(self) -> int:
        return self.units.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.units.shape[1]

    def __eq__(self, other):
        if not isinstance(other, VideoFeatures):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.unit_duration_frames == other.unit_duration_frames
            and self.units.dtype == other.units.dtype
            and np.array_equal(self.units, other.units)
        )


@dataclass(frozen=True)
class SentenceQuery:
    query_id: str
    video_id: str
    tokens: tuple
    gt_moment: tuple | None
    split: str

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.gt_moment is not None:
            object.__setattr__(self, "gt_moment", (int(self.gt_moment[0]), int(self.gt_moment[1])))
        if not self.tokens:
            raise IntegrityError(f"query {self.query_id!r}: empty token sequence")
        if self.split not in SPLITS:
            raise IntegrityError(f"query {self.query_id!r}: unknown split {self.split!r}")


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    features: str
    num_units: int
    unit_duration_frames: int


@dataclass(frozen=True)
class DatasetManifest:
    feature_dim: int
    vocabulary_path: str
    videos: tuple
    queries: tuple
    root: Path = field(default=Path("."), compare=False)

    def video(self, video_id: str) -> VideoEntry:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise IntegrityError(f"unknown video id {video_id!r}")

    def query(self, query_id: str) -> SentenceQuery:
        for q in self.queries:
            if q.query_id == query_id:
                return q
        raise IntegrityError(f"unknown query id {query_id!r}")

    def split(self, name: str) -> list:
        return [q for q in self.queries if q.split == name]

    def feature_path(self, video_id: str) -> Path:
        return self.root / self.video(video_id).features

    def load_video(self, video_id: str) -> VideoFeatures:
        entry = self.video(video_id)
        feats = read_features(self.root / entry.features, video_id=video_id)
        return VideoFeatures(video_id, feats.units, entry.unit_duration_frames)

    def load_videos(self, video_ids=None) -> dict:
        ids = [v.video_id for v in self.videos] if video_ids is None else list(dict.fromkeys(video_ids))
        return {vid: self.load_video(vid) for vid in ids}

    def vocabulary(self) -> dict:
        return load_vocab(self.root / self.vocabulary_path)


@dataclass(frozen=True)
class SyntheticConfig:
    num_videos: dict = field(default_factory=lambda: {"train": 200, "val": 50, "test": 50})
    units_per_video: int = 16
    feature_dim: int = 64
    vocab_size: int = 100
    sentence_length: int = 6
    moments_per_video: int = 2
    moment_length_range: tuple = (3, 5)
    signal_to_noise: float = 8.0
    seed: int = 0
    unit_duration_frames: int = 16

    def validate(self):
        lo, hi = self.moment_length_range
        if set(self.num_videos) - set(SPLITS):
            raise ConfigError(f"unknown split names in num_videos: {sorted(set(self.num_videos) - set(SPLITS))}")
        if any(int(n) < 0 for n in self.num_videos.values()):
            raise ConfigError("num_videos must be non-negative")
        for name in ("units_per_video", "feature_dim", "vocab_size", "sentence_length",
                     "moments_per_video", "unit_duration_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad moment_length_range {self.moment_length_range}")
        if hi > self.units_per_video:
            raise ConfigError(f"moment length {hi} exceeds units_per_video {self.units_per_video}")
        if self.moments_per_video * hi > self.units_per_video:
            raise ConfigError(
                f"cannot place {self.moments_per_video} disjoint moments of up to {hi} units "
                f"in {self.units_per_video} units"
            )
        if not self.signal_to_noise > 0:
            raise ConfigError("signal_to_noise must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        d = dict(d)
        if "moment_length_range" in d:
            d["moment_length_range"] = tuple(d["moment_length_range"])
        if "num_videos" in d:
            d["num_videos"] = {k: int(v) for k, v in d["num_videos"].items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "num_videos": dict(self.num_videos),
            "units_per_video": self.units_per_video,
            "feature_dim": self.feature_dim,
            "vocab_size": self.vocab_size,
            "sentence_length": self.sentence_length,
            "moments_per_video": self.moments_per_video,
            "moment_length_range": list(self.moment_length_range),
            "signal_to_noise": self.signal_to_noise,
            "seed": self.seed,
            "unit_duration_frames": self.unit_duration_frames,
        }


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

_FEATURE_HEADER = struct.Struct("<4sIII")


def write_features(features: VideoFeatures, path) -> None:
    units = np.asarray(features.units)
    if not np.all(np.isfinite(units)):
        raise FormatError(f"{path}: refusing to write non-finite features")
    data = np.ascontiguousarray(units, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_feature_header(path) -> tuple:
    with open(path, "rb") as fh:
        head = fh.read(_FEATURE_HEADER.size)
    return _parse_feature_header(head, path)


def _parse_feature_header(head: bytes, path):
    if len(head) < _FEATURE_HEADER.size:
        raise TruncationError(f"{path}: truncated header")
    magic, version, n, d = _FEATURE_HEADER.unpack(head[: _FEATURE_HEADER.size])
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    if version != FEATURE_VERSION:
        raise VersionError(f"{path}: unsupported feature version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty feature matrix {n}x{d}")
    return n, d


def read_features(path, video_id: str | None = None, unit_duration_frames: int = 16) -> VideoFeatures:
    path = Path(path)
    raw = path.read_bytes()
    n, d = _parse_feature_header(raw, path)
    payload = raw[_FEATURE_HEADER.size:]
    expected = n * d * 4
    if len(payload) < expected:
        raise TruncationError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    units = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(units)):
        raise FormatError(f"{path}: non-finite feature values")
    return VideoFeatures(video_id if video_id is not None else path.stem, units, unit_duration_frames)


# ---------------------------------------------------------------------------
# Vocabulary and manifest
# ---------------------------------------------------------------------------


def load_vocab(path) -> dict:
    try:
        vocab = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: cannot read vocabulary: {e}") from e
    if not isinstance(vocab, dict):
        raise FormatError(f"{path}: vocabulary must be a JSON object")
    ids = sorted(vocab.values())
    if ids != list(range(len(ids))):
        raise FormatError(f"{path}: vocabulary ids must be dense from 0")
    return vocab


def tokenize(text: str, vocab: dict) -> tuple:
    """Whitespace split and lookup; unknown words raise."""
    out = []
    for word in text.split():
        if word not in vocab:
            raise IntegrityError(f"word {word!r} not in vocabulary")
        out.append(vocab[word])
    if not out:
        raise IntegrityError("empty sentence")
    return tuple(out)


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n", encoding="utf-8")


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "feature_dim": m.feature_dim,
        "vocabulary": m.vocabulary_path,
        "videos": [
            {"id": v.video_id, "features": v.features, "num_units": v.num_units,
             "unit_duration_frames": v.unit_duration_frames}
            for v in m.videos
        ],
        "queries": [
            {"id": q.query_id, "video_id": q.video_id, "tokens": list(q.tokens),
             "gt_moment": list(q.gt_moment) if q.gt_moment is not None else None, "split": q.split}
            for q in m.queries
        ],
    }


def write_manifest(m: DatasetManifest, path) -> None:
    _dump_json(manifest_to_dict(m), path)


def load_manifest(path) -> DatasetManifest:
    """Parse and fully validate a manifest, including feature file headers."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise FormatError(f"{path}: cannot read manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: manifest is not valid JSON: {e}") from e
    root = path.parent
    try:
        feature_dim = int(raw["feature_dim"])
        vocab_path = str(raw["vocabulary"])
        videos = tuple(
            VideoEntry(str(v["id"]), str(v["features"]), int(v["num_units"]), int(v["unit_duration_frames"]))
            for v in raw["videos"]
        )
        queries = tuple(
            SentenceQuery(str(q["id"]), str(q["video_id"]), q["tokens"], q.get("gt_moment"), str(q["split"]))
            for q in raw["queries"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed manifest: {e!r}") from e

    if feature_dim < 1:
        raise FormatError(f"{path}: feature_dim must be positive")
    by_id = {}
    for v in videos:
        if v.video_id in by_id:
            raise IntegrityError(f"{path}: duplicate video id {v.video_id!r}")
        if v.num_units < 1 or v.unit_duration_frames < 1:
            raise IntegrityError(f"{path}: video {v.video_id!r} has invalid num_units/unit_duration_frames")
        by_id[v.video_id] = v
        fpath = root / v.features
        if not fpath.is_file():
            raise IntegrityError(f"{path}: feature file {fpath} for video {v.video_id!r} does not exist")
        n, d = read_feature_header(fpath)
        if n != v.num_units or d != feature_dim:
            raise IntegrityError(
                f"{path}: video {v.video_id!r} header says {n}x{d}, manifest declares {v.num_units}x{feature_dim}"
            )

    vocab = load_vocab(root / vocab_path)
    seen = set()
    for q in queries:
        if q.query_id in seen:
            raise IntegrityError(f"{path}: duplicate query id {q.query_id!r}")
        seen.add(q.query_id)
        if q.video_id not in by_id:
            raise IntegrityError(f"{path}: query {q.query_id!r} references unknown video {q.video_id!r}")
        bad = [t for t in q.tokens if not 0 <= t < len(vocab)]
        if bad:
            raise IntegrityError(f"{path}: query {q.query_id!r} has out-of-range token ids {bad}")
        if q.gt_moment is not None:
            s, e = q.gt_moment
            if not 0 <= s < e <= by_id[q.video_id].num_units:
                raise IntegrityError(f"{path}: query {q.query_id!r} has invalid gt_moment {q.gt_moment}")
    return DatasetManifest(feature_dim, vocab_path, videos, queries, root)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _place_moments(rng, units: int, lengths) -> list:
    """Disjoint intervals with the given lengths in a random order and gap layout."""
    lengths = [int(x) for x in rng.permutation(np.asarray(lengths))]
    free = units - sum(lengths)
    offsets = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    out, used = [], 0
    for off, length in zip(offsets, lengths):
        start = int(off) + used
        out.append((start, start + length))
        used += length
    return out


def generate_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write a dataset with planted sentence moments to ``out_dir``.

    Every planted moment carries the projection ``M @ c`` of its sentence's
    concept vector ``c`` (mean of per-token concept vectors) plus noise; units
    outside any moment are pure noise.  The noise scale makes the mean signal
    power over the noise power equal ``signal_to_noise``.
    """
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    dim = config.feature_dim
    token_concepts = rng.standard_normal((config.vocab_size, dim))
    mixing = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    lo, hi = config.moment_length_range

    layout = []
    for split in SPLITS:
        for i in range(int(config.num_videos.get(split, 0))):
            vid = f"{split}_{i:05d}"
            lengths = rng.integers(lo, hi + 1, size=config.moments_per_video)
            moments = _place_moments(rng, config.units_per_video, lengths)
            planted = []
            for (s, e) in moments:
                tokens = rng.integers(0, config.vocab_size, size=config.sentence_length)
                signal = mixing @ token_concepts[tokens].mean(axis=0)
                planted.append((s, e, tuple(int(t) for t in tokens), signal))
            layout.append((split, vid, planted))

    signals = [p[3] for _, _, planted in layout for p in planted]
    signal_power = float(np.mean(np.square(signals))) if signals else 1.0
    noise_scale = math.sqrt(signal_power / config.signal_to_noise)

    videos, queries = [], []
    for split, vid, planted in layout:
        units = noise_scale * rng.standard_normal((config.units_per_video, dim))
        for j, (s, e, tokens, signal) in enumerate(planted):
            units[s:e] += signal
            queries.append(SentenceQuery(f"{vid}_q{j}", vid, tokens, (s, e), split))
        rel = f"features/{vid}.tgaf"
        write_features(VideoFeatures(vid, units.astype(np.float32), config.unit_duration_frames), out_dir / rel)
        videos.append(VideoEntry(vid, rel, config.units_per_video, config.unit_duration_frames))

    _dump_json({f"w{i}": i for i in range(config.vocab_size)}, out_dir / "vocab.json")
    manifest = DatasetManifest(dim, "vocab.json", tuple(videos), tuple(queries), out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest


def synthetic_concepts(config: SyntheticConfig):
    """Recreate the seeded token-concept table and mixing matrix of a config."""
    rng = np.random.default_rng(config.seed)
    token_concepts = rng.standard_normal((config.vocab_size, config.feature_dim))
    mixing = rng.standard_normal((config.feature_dim, config.feature_dim)) / math.sqrt(config.feature_dim)
    return token_concepts, mixing


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sII")


def save_checkpoint(tensors: dict, path) -> None:
    chunks = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: tensor {name!r} has non-finite values")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read named float32 tensors, preserving file order."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise TruncationError(f"{path}: truncated checkpoint header")
    magic, version, count = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    pos = _CKPT_HEADER.size
    tensors = {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncationError(f"{path}: truncated while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        try:
            name = take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: shape table corrupt (tensor {i} name not UTF-8)") from e
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        if name in tensors:
            raise FormatError(f"{path}: shape table corrupt (duplicate tensor {name!r})")
        size = int(np.prod(dims, dtype=np.int64))
        data = take(4 * size, f"data of {name!r}")
        arr = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: tensor {name!r} has non-finite values")
        tensors[name] = arr
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes after {count} tensors")
    return tensors
