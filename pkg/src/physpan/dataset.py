"""On-disk dataset format, frame subsampling, sample expansion, and splits.

A dataset directory holds `manifest.json` plus one subdirectory per scene
with three blobs: all raw frames, the target-object masks for the three
input frames, and the float64 trajectory record. Scene blobs are checksummed
and verified on first read.

Time indexing: raw frames are subsampled by keeping every second one; of the
kept frames, the first `m_input` are the model's observed input and the next
`horizon` are prediction targets. Positions inside the horizon are 0-based.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DomainError, FormatError
from .microworld import SHAPE_IDS, TASK_IDS, Episode, WorldConfig
from .rng import SplitMix64, derive

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_M_INPUT = 3
DEFAULT_HORIZON = 37

# raw frames kept at interval 2; inputs/targets are slices of the kept frames
FRAME_INTERVAL = 2
_MIN_RAW = 80


def subsample_frames(raw: np.ndarray) -> np.ndarray:
    """Keep every second raw frame: kept[k] = raw[2k]."""
    n = raw.shape[0]
    if n % 2 != 0 or n < _MIN_RAW:
        raise FormatError(f"need an even raw frame count >= {_MIN_RAW}, got {n}")
    return raw[::FRAME_INTERVAL]


def raw_to_kept(raw_index: int) -> int:
    return raw_index // FRAME_INTERVAL


def kept_to_horizon(kept_index: int, m_input: int = DEFAULT_M_INPUT) -> int:
    """0-based position of a kept frame within the generated horizon."""
    return kept_index - m_input


def raw_to_horizon(raw_index: int, m_input: int = DEFAULT_M_INPUT) -> int:
    return kept_to_horizon(raw_to_kept(raw_index), m_input)


@dataclass
class SceneRecord:
    scene_id: str
    task: str
    seed: int
    unseen: bool
    objects: list[dict]          # shape/color/extent/static/queryable/label per object
    events: list[dict]
    split: str | None
    paths: dict[str, str]        # frames / input_masks / trajectory, relative
    checksums: dict[str, str]

    @property
    def queryable_ids(self) -> list[int]:
        return [o["object_id"] for o in self.objects if o["queryable"]]

    def label_of(self, object_id: int) -> int:
        for o in self.objects:
            if o["object_id"] == object_id:
                if o["label"] is None:
                    raise DomainError(f"object {object_id} in {self.scene_id} has no outcome label")
                return int(o["label"])
        raise DomainError(f"no object {object_id} in {self.scene_id}")


@dataclass
class Manifest:
    root: Path
    task: str
    seed: int
    config: WorldConfig
    scenes: list[SceneRecord]
    format_version: int = FORMAT_VERSION

    @property
    def scene_count(self) -> int:
        return len(self.scenes)

    def scene(self, scene_id: str) -> SceneRecord:
        for rec in self.scenes:
            if rec.scene_id == scene_id:
                return rec
        raise DomainError(f"no scene {scene_id!r} in manifest")

    def split_scenes(self, split: str) -> list[SceneRecord]:
        if split not in SPLITS:
            raise DomainError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [rec for rec in self.scenes if rec.split == split]


@dataclass
class Sample:
    """One (scene, target object) prediction instance."""

    scene_id: str
    object_id: int
    query: tuple[int, int, int]          # task id, color id, shape id
    input_frames: np.ndarray             # (M, 3, H, W) float32
    input_masks: np.ndarray              # (M, H, W) float32
    target_frames: np.ndarray            # (N, 3, H, W) float32
    label: int
    event_horizon_frames: dict[str, list[tuple[int, tuple[int, ...]]]] = field(default_factory=dict)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _scene_dir(root: Path, scene_id: str) -> Path:
    return root / "scenes" / scene_id


def episode_to_record(episode: Episode, scene_id: str, root: Path) -> SceneRecord:
    """Write one episode's blobs under root and describe them."""
    from . import blobio

    sdir = _scene_dir(root, scene_id)
    sdir.mkdir(parents=True, exist_ok=True)
    input_mask_frames = [k * FRAME_INTERVAL for k in range(DEFAULT_M_INPUT)]
    masks = episode.masks[:, input_mask_frames]
    traj = np.concatenate([episode.trajectory.positions, episode.trajectory.velocities], axis=2)

    paths = {"frames": "frames.blob", "input_masks": "input_masks.blob", "trajectory": "trajectory.blob"}
    blobio.write_blob(sdir / paths["frames"], episode.frames)
    blobio.write_blob(sdir / paths["input_masks"], masks)
    blobio.write_blob(sdir / paths["trajectory"], traj)

    objects = []
    for i, spec in enumerate(episode.specs):
        objects.append({
            "object_id": i,
            "shape": spec.shape,
            "shape_id": SHAPE_IDS[spec.shape],
            "color": spec.color,
            "half_extent": spec.half_extent,
            "static": spec.static,
            "queryable": i in episode.queryable,
            "label": episode.labels.get(i),
        })
    rel = {k: f"scenes/{scene_id}/{v}" for k, v in paths.items()}
    checksums = {k: _sha256(root / rel[k]) for k in rel}
    return SceneRecord(scene_id=scene_id, task=episode.task, seed=episode.seed,
                       unseen=episode.unseen, objects=objects,
                       events=[e.to_dict() for e in episode.events],
                       split=None, paths=rel, checksums=checksums)


def save_manifest(manifest: Manifest) -> None:
    doc = {
        "format_version": manifest.format_version,
        "task": manifest.task,
        "seed": manifest.seed,
        "config": manifest.config.to_dict(),
        "scene_count": manifest.scene_count,
        "scenes": [{
            "scene_id": r.scene_id, "task": r.task, "seed": r.seed, "unseen": r.unseen,
            "object_count": len(r.objects), "objects": r.objects, "events": r.events,
            "split": r.split, "paths": r.paths, "checksums": r.checksums,
        } for r in manifest.scenes],
    }
    (manifest.root / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1))


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {doc.get('format_version')} not supported")
    scenes = [SceneRecord(scene_id=s["scene_id"], task=s["task"], seed=s["seed"],
                          unseen=s["unseen"], objects=s["objects"], events=s["events"],
                          split=s["split"], paths=s["paths"], checksums=s["checksums"])
              for s in doc["scenes"]]
    return Manifest(root=root, task=doc["task"], seed=doc["seed"],
                    config=WorldConfig.from_dict(doc["config"]), scenes=scenes)


def write_dataset(episodes, root, task: str, seed: int, config: WorldConfig) -> Manifest:
    """Write episodes (any iterable) into a dataset directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, ep in enumerate(episodes):
        records.append(episode_to_record(ep, f"scene_{idx:05d}", root))
    manifest = Manifest(root=root, task=task, seed=seed, config=config, scenes=records)
    save_manifest(manifest)
    return manifest


def split_dataset(manifest: Manifest, seed: int) -> Manifest:
    """Assign 60/20/20 splits, stratified by task, deterministically in seed.

    For mixed-task datasets every split gets equal per-task counts; at most
    two surplus scenes per task are dropped (left unassigned) with a warning.
    """
    if manifest.scene_count < 5:
        raise DomainError(f"need at least 5 scenes to split, got {manifest.scene_count}")
    by_task: dict[str, list[SceneRecord]] = {}
    for rec in manifest.scenes:
        rec.split = None
        by_task.setdefault(rec.task, []).append(rec)

    if len(by_task) > 1:
        smallest = min(len(v) for v in by_task.values())
        for task, recs in by_task.items():
            surplus = len(recs) - smallest
            if surplus:
                if surplus > 2:
                    raise DomainError(
                        f"mixed-task dataset is too ragged: task {task} has {surplus} surplus scenes")
                warnings.warn(f"dropping {surplus} surplus {task} scene(s) to balance splits")
                drop_rng = SplitMix64(derive(seed, SHAPE_IDS.get(task, 0), 77))
                idx = list(range(len(recs)))
                drop_rng.shuffle(idx)
                keep = sorted(idx[:smallest])
                by_task[task] = [recs[i] for i in keep]

    for task, recs in sorted(by_task.items()):
        order = list(range(len(recs)))
        rng = SplitMix64(derive(seed, len(recs), sum(map(ord, task))))
        rng.shuffle(order)
        n = len(recs)
        n_train = round(0.6 * n)
        n_val = round(0.2 * n)
        for pos, idx in enumerate(order):
            if pos < n_train:
                recs[idx].split = "train"
            elif pos < n_train + n_val:
                recs[idx].split = "val"
            else:
                recs[idx].split = "test"
    return manifest


class SceneCache:
    """Loads, verifies, and caches the per-scene arrays a trainer needs."""

    def __init__(self, manifest: Manifest, m_input: int = DEFAULT_M_INPUT,
                 horizon: int = DEFAULT_HORIZON, max_scenes: int = 512):
        self.manifest = manifest
        self.m_input = m_input
        self.horizon = horizon
        self.max_scenes = max_scenes
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _verify(self, rec: SceneRecord, key: str) -> Path:
        path = self.manifest.root / rec.paths[key]
        if not path.exists():
            raise FormatError(f"missing blob {path}")
        if _sha256(path) != rec.checksums[key]:
            raise CorruptionError(f"checksum mismatch for {path}")
        return path

    def _load_scene(self, rec: SceneRecord) -> tuple[np.ndarray, np.ndarray]:
        from . import blobio

        if rec.scene_id not in self._cache:
            frames = blobio.read_blob(self._verify(rec, "frames"))
            masks = blobio.read_blob(self._verify(rec, "input_masks"))
            kept = subsample_frames(frames)
            need = self.m_input + self.horizon
            if kept.shape[0] < need:
                raise FormatError(
                    f"{rec.scene_id}: only {kept.shape[0]} kept frames, need {need}")
            if len(self._cache) >= self.max_scenes:
                self._cache.pop(next(iter(self._cache)))
            self._cache[rec.scene_id] = (np.ascontiguousarray(kept[:need]), masks)
        return self._cache[rec.scene_id]

    def load_sample(self, rec: SceneRecord, object_id: int) -> Sample:
        kept, masks = self._load_scene(rec)
        obj = next((o for o in rec.objects if o["object_id"] == object_id), None)
        if obj is None or not obj["queryable"]:
            raise DomainError(f"object {object_id} of {rec.scene_id} is not queryable")
        events: dict[str, list] = {}
        for ev in rec.events:
            h = raw_to_horizon(ev["frame"], self.m_input)
            events.setdefault(ev["kind"], []).append((h, tuple(ev["objects"])))
        return Sample(
            scene_id=rec.scene_id,
            object_id=object_id,
            query=(TASK_IDS[rec.task], int(obj["color"]), int(obj["shape_id"])),
            input_frames=kept[:self.m_input],
            input_masks=masks[object_id],
            target_frames=kept[self.m_input:self.m_input + self.horizon],
            label=rec.label_of(object_id),
            event_horizon_frames=events,
        )

    def samples_of(self, split: str) -> list[tuple[SceneRecord, int]]:
        """Sample index for a split: one entry per (scene, queryable object)."""
        out = []
        for rec in self.manifest.split_scenes(split):
            for oid in rec.queryable_ids:
                out.append((rec, oid))
        return out
