"""Feature packs, manifests, batching and the synthetic corpus generator.

On-disk layout of a dataset root::

    manifest.json          entries (video_id, pack path, captions) + split
    captions.jsonl         one {"video_id", "caption"} object per line
    packs/<video_id>/      meta.json, frames.bin, objects.json
"""
from __future__ import annotations

import json
import math
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

MAX_FRAMES = 80
D_VIS = 2048
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Detection:
    label: str
    objectness: float
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.label:
            raise FormatError("detection label must be non-empty")
        if not (0.0 <= self.objectness <= 1.0):
            raise FormatError(f"objectness {self.objectness!r} outside [0, 1]")


@dataclass
class FeaturePack:
    video_id: str
    frame_features: np.ndarray  # (n_frames, d_vis) float32
    detections: list[list[Detection]]

    @property
    def n_frames(self) -> int:
        return int(self.frame_features.shape[0])

    @property
    def d_vis(self) -> int:
        return int(self.frame_features.shape[1])

    def validate(self, max_frames: int = MAX_FRAMES) -> None:
        feats = self.frame_features
        if feats.ndim != 2:
            raise FormatError("frame_features: expected a 2-d matrix")
        if not 1 <= feats.shape[0] <= max_frames:
            raise FormatError(f"n_frames: {feats.shape[0]} not in [1, {max_frames}]")
        if not np.all(np.isfinite(feats)):
            raise FormatError("frame_features: non-finite values")
        if len(self.detections) != feats.shape[0]:
            raise FormatError(
                f"objects: {len(self.detections)} frame entries for {feats.shape[0]} frames"
            )


@dataclass(frozen=True)
class CaptionRecord:
    video_id: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise FormatError(f"caption for {self.video_id!r} is empty")
        for tok in self.tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise FormatError(f"bad token {tok!r} in caption for {self.video_id!r}")


@dataclass
class ManifestEntry:
    video_id: str
    pack: str  # path relative to the dataset root
    captions: list[tuple[str, ...]]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest: duplicate video_id")
        for e in self.entries:
            if not e.captions:
                raise FormatError(f"manifest: {e.video_id!r} has no captions")
        seen: set[str] = set()
        known = set(ids)
        for name, vids in self.split.items():
            if name not in SPLITS:
                raise FormatError(f"manifest: unknown split {name!r}")
            overlap = seen.intersection(vids)
            if overlap:
                raise FormatError(f"manifest: video {sorted(overlap)[0]!r} in two splits")
            missing = set(vids) - known
            if missing:
                raise FormatError(f"manifest: split {name!r} names unknown video {sorted(missing)[0]!r}")
            seen.update(vids)
        self._by_id = {e.video_id: e for e in self.entries}

    def __getitem__(self, video_id: str) -> ManifestEntry:
        return self._by_id[video_id]

    def videos(self, split: str) -> list[str]:
        return list(self.split.get(split, []))

    def caption_records(self, split: str | None = None) -> list[CaptionRecord]:
        vids = self.videos(split) if split else [e.video_id for e in self.entries]
        return [CaptionRecord(v, c) for v in vids for c in self[v].captions]

    def to_json(self) -> dict:
        return {
            "entries": [
                {"video_id": e.video_id, "pack": e.pack, "captions": [" ".join(c) for c in e.captions]}
                for e in self.entries
            ],
            "split": {k: list(v) for k, v in self.split.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            entries = [
                ManifestEntry(
                    video_id=str(e["video_id"]),
                    pack=str(e["pack"]),
                    captions=[tuple(tokenize(c)) for c in e["captions"]],
                )
                for e in obj["entries"]
            ]
            split = {str(k): [str(v) for v in vs] for k, vs in obj.get("split", {}).items()}
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest: malformed entry ({exc})") from None
        return cls(entries, split)


@dataclass
class Batch:
    video_ids: list[str]
    captions: list[tuple[str, ...]]

    def __len__(self):
        return len(self.video_ids)


_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


def tokenize(caption: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", caption.lower()).split()


def normalize_label(label: str) -> str:
    # multi-word detector classes ("traffic light") become single tokens
    return "_".join(tokenize(label))


# ---------------------------------------------------------------- feature packs


def subsample_indices(n_frames: int, max_frames: int = MAX_FRAMES) -> np.ndarray:
    """Uniform stride from index 0; identity when ``n_frames <= max_frames``."""
    if n_frames <= max_frames:
        return np.arange(n_frames)
    stride = n_frames // max_frames
    return np.arange(max_frames) * stride


def write_feature_pack(pack: FeaturePack, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feats = np.ascontiguousarray(pack.frame_features, dtype="<f4")
    meta = {"video_id": pack.video_id, "n_frames": int(feats.shape[0]), "d_vis": int(feats.shape[1])}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    (directory / "frames.bin").write_bytes(feats.tobytes(order="C"))
    objects = [
        [{"label": d.label, "objectness": d.objectness, "bbox": list(d.bbox)} for d in frame]
        for frame in pack.detections
    ]
    (directory / "objects.json").write_text(json.dumps(objects, sort_keys=True) + "\n")
    return directory


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise FormatError(f"{what}: missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{what}: invalid JSON in {path} ({exc.msg})") from None


def load_feature_pack(path: str | Path, max_frames: int = MAX_FRAMES) -> FeaturePack:
    """Read and validate a pack; videos longer than ``max_frames`` are subsampled."""
    path = Path(path)
    meta = _read_json(path / "meta.json", "meta.json")
    for key in ("video_id", "n_frames", "d_vis"):
        if key not in meta:
            raise FormatError(f"meta.json: missing field {key!r}")
    n, d = meta["n_frames"], meta["d_vis"]
    if not isinstance(n, int) or n < 1:
        raise FormatError(f"meta.json: n_frames must be a positive integer, got {n!r}")
    if not isinstance(d, int) or d < 1:
        raise FormatError(f"meta.json: d_vis must be a positive integer, got {d!r}")

    try:
        raw = (path / "frames.bin").read_bytes()
    except FileNotFoundError:
        raise FormatError(f"frames.bin: missing file in {path}") from None
    if len(raw) != n * d * 4:
        raise FormatError(f"frames.bin: {len(raw)} bytes, expected n_frames*d_vis*4 = {n * d * 4}")
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, d).astype(np.float32)
    if not np.all(np.isfinite(feats)):
        raise FormatError("frames.bin: non-finite values")

    objects = _read_json(path / "objects.json", "objects.json")
    if not isinstance(objects, list) or len(objects) != n:
        raise FormatError(f"objects.json: expected a list of {n} per-frame lists")
    detections = []
    for i, frame in enumerate(objects):
        try:
            detections.append(
                [
                    Detection(str(o["label"]), float(o["objectness"]), tuple(float(x) for x in o.get("bbox", (0, 0, 0, 0))))
                    for o in frame
                ]
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"objects.json: frame {i}: malformed detection ({exc})") from None
        except FormatError as exc:
            raise FormatError(f"objects.json: frame {i}: {exc}") from None

    idx = subsample_indices(n, max_frames)
    pack = FeaturePack(str(meta["video_id"]), feats[idx], [detections[i] for i in idx])
    pack.validate(max_frames)
    return pack


def dominant_object(detections: Sequence[Detection]) -> str | None:
    """Label of the highest-objectness detection; earliest wins ties. None if empty."""
    best = None
    for det in detections:
        if best is None or det.objectness > best.objectness:
            best = det
    return None if best is None else best.label


# ---------------------------------------------------------------- manifests


def save_manifest(manifest: DatasetManifest, root: str | Path) -> None:
    root = Path(root)
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")
    with open(root / "captions.jsonl", "w") as fh:
        for e in manifest.entries:
            for c in e.captions:
                fh.write(json.dumps({"caption": " ".join(c), "video_id": e.video_id}, sort_keys=True) + "\n")


def load_manifest(root: str | Path) -> DatasetManifest:
    return DatasetManifest.from_json(_read_json(Path(root) / "manifest.json", "manifest.json"))


def read_captions_jsonl(path: str | Path) -> list[CaptionRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(CaptionRecord(str(obj["video_id"]), tuple(tokenize(obj["caption"]))))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"captions.jsonl: line {lineno}: {exc}") from None
    return records


@dataclass
class Dataset:
    """A manifest together with its loaded feature packs."""

    root: Path
    manifest: DatasetManifest
    packs: dict[str, FeaturePack]

    @property
    def d_vis(self) -> int:
        return next(iter(self.packs.values())).d_vis

    def videos(self, split: str) -> list[str]:
        return self.manifest.videos(split)


def load_dataset(root: str | Path, max_frames: int = MAX_FRAMES) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    packs = {}
    for e in manifest.entries:
        pack = load_feature_pack(root / e.pack, max_frames)
        if pack.video_id != e.video_id:
            raise FormatError(f"meta.json: video_id {pack.video_id!r} does not match manifest {e.video_id!r}")
        packs[e.video_id] = pack
    dims = {p.d_vis for p in packs.values()}
    if len(dims) > 1:
        raise FormatError(f"frames.bin: inconsistent d_vis across packs {sorted(dims)}")
    return Dataset(root, manifest, packs)


def make_batches(manifest: DatasetManifest, batch_size: int, seed: int, split: str = "train") -> list[Batch]:
    """Shuffle the split into full batches of distinct videos, one caption each.

    A trailing partial batch is dropped so every batch can be halved.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigurationError(f"batch_size must be even and >= 2, got {batch_size}")
    vids = manifest.videos(split)
    if batch_size > len(vids):
        raise ConfigurationError(f"batch_size {batch_size} exceeds {len(vids)} {split} videos")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(vids))
    batches = []
    for start in range(0, len(vids) - batch_size + 1, batch_size):
        chosen = [vids[i] for i in order[start : start + batch_size]]
        caps = [manifest[v].captions[int(rng.integers(len(manifest[v].captions)))] for v in chosen]
        batches.append(Batch(chosen, caps))
    return batches


# ---------------------------------------------------------------- synthetic corpus

_SUBJECTS = ["man", "woman", "dog", "cat", "child", "bird", "horse", "girl", "boy", "monkey"]
_VERBS = [
    ("run", "running"), ("dance", "dancing"), ("swim", "swimming"), ("cook", "cooking"),
    ("sing", "singing"), ("ride", "riding"), ("jump", "jumping"), ("play", "playing"),
    ("eat", "eating"), ("climb", "climbing"),
]
_DISTRACTORS = ["chair", "table", "car", "tree", "bottle"]


@dataclass(frozen=True)
class SyntheticEvent:
    subject: str
    verb: str
    prototype: np.ndarray

    @property
    def caption(self) -> tuple[str, ...]:
        return ("a", self.subject, "is", self.verb)


def synthetic_events(vocab_events: int, d_vis: int, rng: np.random.Generator) -> list[SyntheticEvent]:
    pairs = [(s, v) for s in _SUBJECTS for _, v in _VERBS]
    if vocab_events > len(pairs):
        raise ConfigurationError(f"vocab_events must be <= {len(pairs)}")
    picks = rng.permutation(len(pairs))[:vocab_events]
    protos = rng.standard_normal((vocab_events, d_vis)).astype(np.float32)
    return [SyntheticEvent(*pairs[int(k)], protos[i]) for i, k in enumerate(picks)]


def generate_synthetic_dataset(
    n_videos: int,
    vocab_events: int,
    seed: int,
    *,
    d_vis: int = D_VIS,
    frames: tuple[int, int] = (8, 16),
    noise: float = 0.1,
    val_fraction: float = 0.0,
    test_fraction: float = 0.0,
    out: str | Path | None = None,
) -> tuple[DatasetManifest, dict[str, FeaturePack]]:
    """Build a toy corpus where each video is noisy frames around one event prototype.

    Video ``i`` shows event ``i % vocab_events``; its caption is the event's
    template ``a <subject> is <verb>ing`` and the subject is the top
    detection in most frames. Written to ``out`` when given.
    """
    if n_videos < 2 or vocab_events < 2:
        raise ConfigurationError("n_videos and vocab_events must both be >= 2")
    rng = np.random.default_rng(seed)
    events = synthetic_events(vocab_events, d_vis, rng)

    packs: dict[str, FeaturePack] = {}
    entries = []
    width = max(4, len(str(n_videos - 1)))
    for i in range(n_videos):
        vid = f"vid{i:0{width}d}"
        ev = events[i % vocab_events]
        n = int(rng.integers(frames[0], frames[1] + 1))
        feats = ev.prototype + noise * rng.standard_normal((n, d_vis)).astype(np.float32)
        dets = []
        for _ in range(n):
            if rng.random() < 0.1:
                dets.append([])  # detector miss
                continue
            top = round(float(rng.uniform(0.6, 1.0)), 4)
            frame = [Detection(ev.subject, top, _bbox(rng))]
            for _ in range(int(rng.integers(0, 3))):
                label = _DISTRACTORS[int(rng.integers(len(_DISTRACTORS)))]
                frame.append(Detection(label, round(float(rng.uniform(0.05, 0.55)), 4), _bbox(rng)))
            order = rng.permutation(len(frame))
            dets.append([frame[k] for k in order])
        packs[vid] = FeaturePack(vid, feats.astype(np.float32), dets)
        entries.append(ManifestEntry(vid, f"packs/{vid}", [ev.caption]))

    n_test = int(math.floor(n_videos * test_fraction))
    n_val = int(math.floor(n_videos * val_fraction))
    ids = [e.video_id for e in entries]
    order = rng.permutation(n_videos)
    split = {
        "test": sorted(ids[k] for k in order[:n_test]),
        "val": sorted(ids[k] for k in order[n_test : n_test + n_val]),
        "train": sorted(ids[k] for k in order[n_test + n_val :]),
    }
    manifest = DatasetManifest(entries, split)
    if out is not None:
        write_dataset(manifest, packs, out)
    return manifest, packs


def _bbox(rng: np.random.Generator) -> tuple[float, float, float, float]:
    x, y = rng.uniform(0, 0.5, 2)
    w, h = rng.uniform(0.1, 0.5, 2)
    return tuple(round(float(v), 4) for v in (x, y, w, h))


def write_dataset(manifest: DatasetManifest, packs: dict[str, FeaturePack], root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        write_feature_pack(packs[e.video_id], root / e.pack)
    save_manifest(manifest, root)
    return root


def detection_labels(packs: Iterable[FeaturePack]) -> list[str]:
    return sorted({normalize_label(d.label) for p in packs for frame in p.detections for d in frame})
