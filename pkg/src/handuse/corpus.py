"""Corpus data model and ingestion: participants, tasks, detections, labels, hand instances.

A corpus is described by a ``manifest.json`` that points at per-task frame
directories, detection files (JSONL) and annotation files (CSV). Loading
resolves and validates everything except frame pixels, which are read lazily
by the feature extractor.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

log = logging.getLogger(__name__)

SIDES = ("left", "right")
DATASETS = ("home", "homelab")
TASK_KINDS = ("unimanual", "bimanual", "negative")
ROLES = ("manipulator", "stabilizer", "none")
CONTACT_STATES = (
    "no_contact",
    "self_contact",
    "other_person",
    "portable_object",
    "non_portable_object",
)
HAND_CATEGORIES = ("more_affected", "less_affected")

DEFAULT_FPS = 30.0
DEFAULT_RESOLUTION = (720, 405)

Box = tuple[int, int, int, int]


class CorpusError(ValueError):
    """A manifest, detection file, or annotation file violated the schema."""


@dataclass(frozen=True)
class Participant:
    id: str
    affected_side: str
    dataset_membership: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Detection:
    """One detector output for a hand in a frame.

    ``bbox`` is (x, y, w, h) in pixels, already clamped to the frame.
    ``contact_state`` is the external detector's contact class, when present.
    """

    frame_index: int
    hand_side: str
    bbox: Box
    confidence: float
    contact_state: Optional[str] = None
    object_bbox: Optional[Box] = None


@dataclass(frozen=True)
class FrameLabel:
    frame_index: int
    hand_side: str
    interaction: bool
    role: str = "none"


@dataclass(frozen=True)
class Task:
    id: str
    participant_id: str
    dataset: str
    kind: str
    frames_dir: str
    frame_paths: tuple[Path, ...]
    fps: float
    resolution: tuple[int, int]
    detections_file: str
    annotations_file: str
    detections: tuple[Detection, ...]
    labels: tuple[FrameLabel, ...]
    masks_dir: Optional[str] = None
    masks_root: Optional[Path] = None

    @property
    def frame_count(self) -> int:
        return len(self.frame_paths)

    def frame_path(self, frame_index: int) -> Path:
        return self.frame_paths[frame_index]

    def label_counts(self) -> dict[str, int]:
        """Class counts over this task's labels (interaction and role)."""
        counts = {"interaction": 0, "no_interaction": 0, "manipulator": 0, "stabilizer": 0}
        for lab in self.labels:
            counts["interaction" if lab.interaction else "no_interaction"] += 1
            if lab.role != "none":
                counts[lab.role] += 1
        return counts


@dataclass(frozen=True)
class HandInstance:
    """One hand in one frame, the unit sample of both classifiers.

    ``detections`` holds every same-side detection for the frame, ordered by
    descending confidence; ``bbox`` is the most confident one (None when the
    hand was not detected, which downstream forces a negative prediction).
    """

    task_id: str
    frame_index: int
    hand_side: str
    hand_category: str
    bbox: Optional[Box]
    label: FrameLabel
    detections: tuple[Detection, ...] = ()

    @property
    def detection(self) -> Optional[Detection]:
        return self.detections[0] if self.detections else None


@dataclass(frozen=True)
class Corpus:
    root: Path
    participants: dict[str, Participant]
    tasks: dict[str, Task]

    def participant_of(self, task: Task) -> Participant:
        return self.participants[task.participant_id]

    def tasks_of(self, participant_id: str) -> list[Task]:
        return [t for t in self.tasks.values() if t.participant_id == participant_id]


def hand_category(participant: Participant, side: str) -> str:
    """Map a hand side to more-/less-affected for the given participant."""
    if side not in SIDES:
        raise CorpusError(f"unknown hand side {side!r}")
    return "more_affected" if side == participant.affected_side else "less_affected"


def _clamp_box(x: float, y: float, w: float, h: float, resolution: tuple[int, int],
               where: str) -> Box:
    if w < 0 or h < 0:
        raise CorpusError(f"{where}: negative box dimensions ({w}x{h})")
    width, height = resolution
    xi, yi = int(round(x)), int(round(y))
    wi, hi = int(round(w)), int(round(h))
    x0 = max(xi, 0)
    y0 = max(yi, 0)
    x1 = min(xi + wi, width)
    y1 = min(yi + hi, height)
    if x1 <= x0 or y1 <= y0:
        raise CorpusError(f"{where}: box ({x},{y},{w},{h}) lies outside the {width}x{height} frame")
    return (x0, y0, x1 - x0, y1 - y0)


def load_detections(path: Path | str, resolution: tuple[int, int] = DEFAULT_RESOLUTION,
                    frame_count: Optional[int] = None) -> list[Detection]:
    """Parse a detections.jsonl file.

    Returns detections sorted by (frame_index, hand_side), with boxes clamped
    to the frame rectangle. Duplicate same-side detections in a frame are all
    retained for later prediction averaging.

    Raises:
        CorpusError: malformed line (reported with its line number), negative
            box dimensions, or out-of-range fields.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"detections file not found: {path}")
    detections = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path.name}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{where}: malformed JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise CorpusError(f"{where}: expected an object")
            try:
                frame = int(rec["frame"])
                side = rec["side"]
                bbox = rec["bbox"]
                conf = float(rec["conf"])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{where}: missing or malformed field ({exc})") from exc
            if side not in SIDES:
                raise CorpusError(f"{where}: unknown side {side!r}")
            if frame < 0 or (frame_count is not None and frame >= frame_count):
                raise CorpusError(f"{where}: frame index {frame} out of range")
            if not 0.0 <= conf <= 1.0:
                raise CorpusError(f"{where}: confidence {conf} outside [0, 1]")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise CorpusError(f"{where}: bbox must be [x, y, w, h]")
            clamped = _clamp_box(*bbox, resolution=resolution, where=where)
            obj_bbox = None
            if rec.get("obj_bbox") is not None:
                ob = rec["obj_bbox"]
                if not (isinstance(ob, list) and len(ob) == 4):
                    raise CorpusError(f"{where}: obj_bbox must be [x, y, w, h]")
                obj_bbox = _clamp_box(*ob, resolution=resolution, where=where)
            contact = rec.get("contact")
            if contact is not None and contact not in CONTACT_STATES:
                raise CorpusError(f"{where}: unknown contact state {contact!r}")
            detections.append(Detection(frame, side, clamped, conf, contact, obj_bbox))
    detections.sort(key=lambda d: (d.frame_index, d.hand_side))
    return detections


def load_annotations(path: Path | str) -> list[FrameLabel]:
    """Parse an annotations.csv file (header: frame,side,interaction,role).

    Enforces one label per (frame, side) and the role/interaction invariant:
    a role may only be assigned to an interacting hand.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"annotations file not found: {path}")
    labels: list[FrameLabel] = []
    seen: set[tuple[int, str]] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame", "side", "interaction", "role"]:
            raise CorpusError(f"{path.name}: expected header 'frame,side,interaction,role'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path.name}:{lineno}"
            if len(row) != 4:
                raise CorpusError(f"{where}: expected 4 columns, got {len(row)}")
            frame_s, side, inter_s, role = (c.strip() for c in row)
            try:
                frame = int(frame_s)
            except ValueError as exc:
                raise CorpusError(f"{where}: bad frame index {frame_s!r}") from exc
            if side not in SIDES:
                raise CorpusError(f"{where}: unknown side {side!r}")
            if inter_s not in ("0", "1"):
                raise CorpusError(f"{where}: interaction must be 0 or 1, got {inter_s!r}")
            if role not in ROLES:
                raise CorpusError(f"{where}: unknown role {role!r}")
            interaction = inter_s == "1"
            if role != "none" and not interaction:
                raise CorpusError(f"{where}: role without interaction")
            key = (frame, side)
            if key in seen:
                raise CorpusError(f"{where}: duplicate label for frame {frame}, side {side}")
            seen.add(key)
            labels.append(FrameLabel(frame, side, interaction, role))
    labels.sort(key=lambda l: (l.frame_index, l.hand_side))
    return labels


def _list_frames(frames_dir: Path, task_id: str) -> tuple[Path, ...]:
    if not frames_dir.is_dir():
        raise CorpusError(f"task {task_id!r}: frames_dir does not exist: {frames_dir}")
    frames = {}
    for p in frames_dir.iterdir():
        if p.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        if not p.stem.isdigit():
            raise CorpusError(f"task {task_id!r}: frame file {p.name} is not a zero-padded index")
        idx = int(p.stem)
        if idx in frames:
            raise CorpusError(f"task {task_id!r}: duplicate frame index {idx}")
        frames[idx] = p
    if not frames:
        raise CorpusError(f"task {task_id!r}: no frame files in {frames_dir}")
    ordered = [frames[i] for i in sorted(frames)]
    if sorted(frames) != list(range(len(frames))):
        raise CorpusError(f"task {task_id!r}: frame indices are not contiguous from 0")
    return tuple(ordered)


def _validate_task_labels(task_id: str, kind: str, frame_count: int,
                          labels: Iterable[FrameLabel], detections: Iterable[Detection]) -> None:
    for lab in labels:
        if lab.frame_index >= frame_count:
            raise CorpusError(
                f"task {task_id!r}: label frame {lab.frame_index} beyond frame count {frame_count}")
        if lab.role != "none" and kind != "bimanual":
            raise CorpusError(
                f"task {task_id!r}: role label {lab.role!r} in a {kind} task (roles are bimanual-only)")
        if kind == "negative" and lab.interaction:
            raise CorpusError(
                f"task {task_id!r}: negative task has an interaction label at frame {lab.frame_index}")
    for det in detections:
        if det.frame_index >= frame_count:
            raise CorpusError(
                f"task {task_id!r}: detection frame {det.frame_index} beyond frame count {frame_count}")


def load_manifest(path: Path | str) -> Corpus:
    """Load and validate a manifest.json, returning a fully resolved corpus.

    Detection and annotation files are parsed eagerly (they are small text);
    frame pixels are never touched here. Every schema or reference problem is
    reported with its location.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    root = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path.name}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise CorpusError(f"{path.name}: manifest must be an object")

    raw_participants = doc.get("participants")
    if not raw_participants:
        raise CorpusError(f"{path.name}: no participants")
    participants: dict[str, Participant] = {}
    for i, rec in enumerate(raw_participants):
        where = f"{path.name}: participants[{i}]"
        pid = rec.get("id")
        side = rec.get("affected_side")
        if not pid or not isinstance(pid, str):
            raise CorpusError(f"{where}: missing id")
        if side not in SIDES:
            raise CorpusError(f"{where}: affected_side must be left or right, got {side!r}")
        if pid in participants:
            raise CorpusError(f"{where}: duplicate participant id {pid!r}")
        participants[pid] = Participant(pid, side)

    raw_tasks = doc.get("tasks")
    if not raw_tasks:
        raise CorpusError(f"{path.name}: no tasks")
    tasks: dict[str, Task] = {}
    membership: dict[str, set[str]] = {pid: set() for pid in participants}
    for i, rec in enumerate(raw_tasks):
        where = f"{path.name}: tasks[{i}]"
        tid = rec.get("id")
        if not tid or not isinstance(tid, str):
            raise CorpusError(f"{where}: missing task id")
        if tid in tasks:
            raise CorpusError(f"{where}: duplicate task id {tid!r}")
        pid = rec.get("participant_id")
        if pid not in participants:
            raise CorpusError(f"task {tid!r}: unknown participant_id {pid!r}")
        dataset = rec.get("dataset")
        if dataset not in DATASETS:
            raise CorpusError(f"task {tid!r}: dataset must be one of {DATASETS}, got {dataset!r}")
        kind = rec.get("kind")
        if kind not in TASK_KINDS:
            raise CorpusError(f"task {tid!r}: kind must be one of {TASK_KINDS}, got {kind!r}")
        for key in ("frames_dir", "detections", "annotations"):
            if not rec.get(key):
                raise CorpusError(f"task {tid!r}: missing {key}")
        fps = float(rec.get("fps", DEFAULT_FPS))
        resolution = tuple(rec.get("resolution", DEFAULT_RESOLUTION))
        if len(resolution) != 2 or min(resolution) <= 0:
            raise CorpusError(f"task {tid!r}: bad resolution {resolution}")
        frames_dir = rec["frames_dir"]
        frame_paths = _list_frames(root / frames_dir, tid)
        det_file, ann_file = rec["detections"], rec["annotations"]
        if not (root / det_file).exists():
            raise CorpusError(f"task {tid!r}: detections file not found: {det_file}")
        if not (root / ann_file).exists():
            raise CorpusError(f"task {tid!r}: annotations file not found: {ann_file}")
        masks_dir = rec.get("masks")
        masks_root = None
        if masks_dir is not None:
            masks_root = root / masks_dir
            if not masks_root.is_dir():
                raise CorpusError(f"task {tid!r}: masks directory not found: {masks_dir}")
        detections = load_detections(root / det_file, resolution, len(frame_paths))
        labels = load_annotations(root / ann_file)
        _validate_task_labels(tid, kind, len(frame_paths), labels, detections)
        tasks[tid] = Task(
            id=tid, participant_id=pid, dataset=dataset, kind=kind,
            frames_dir=frames_dir, frame_paths=frame_paths, fps=fps,
            resolution=(int(resolution[0]), int(resolution[1])),
            detections_file=det_file, annotations_file=ann_file,
            detections=tuple(detections), labels=tuple(labels),
            masks_dir=masks_dir, masks_root=masks_root,
        )
        membership[pid].add(dataset)

    participants = {
        pid: Participant(p.id, p.affected_side, frozenset(membership[pid]))
        for pid, p in participants.items()
    }
    return Corpus(root=root, participants=participants, tasks=tasks)


def build_instances(corpus: Corpus, task: Task, mode: str) -> list[HandInstance]:
    """Build per-frame hand instances for one task.

    In ``interaction`` mode every labeled (frame, side) yields one instance.
    In ``role`` mode only interacting frames of bimanual tasks do. Instances
    without a matching detection keep ``bbox=None``; when several same-side
    detections exist the instance holds all of them, most confident first.
    """
    if mode not in ("interaction", "role"):
        raise CorpusError(f"unknown mode {mode!r}")
    participant = corpus.participant_of(task)
    by_key: dict[tuple[int, str], list[Detection]] = {}
    for det in task.detections:
        by_key.setdefault((det.frame_index, det.hand_side), []).append(det)
    for dets in by_key.values():
        dets.sort(key=lambda d: (-d.confidence, d.bbox))
    instances = []
    for lab in task.labels:
        if mode == "role" and not (task.kind == "bimanual" and lab.interaction):
            continue
        candidates = tuple(by_key.get((lab.frame_index, lab.hand_side), ()))
        instances.append(HandInstance(
            task_id=task.id,
            frame_index=lab.frame_index,
            hand_side=lab.hand_side,
            hand_category=hand_category(participant, lab.hand_side),
            bbox=candidates[0].bbox if candidates else None,
            label=lab,
            detections=candidates,
        ))
    return instances


# Canonical serialization; dump(load(x)) is the canonical form of x.

def dump_manifest(corpus: Corpus) -> str:
    doc = {
        "participants": [
            {"id": p.id, "affected_side": p.affected_side}
            for p in sorted(corpus.participants.values(), key=lambda p: p.id)
        ],
        "tasks": [],
    }
    for task in sorted(corpus.tasks.values(), key=lambda t: t.id):
        rec = {
            "id": task.id,
            "participant_id": task.participant_id,
            "dataset": task.dataset,
            "kind": task.kind,
            "frames_dir": task.frames_dir,
            "fps": task.fps,
            "resolution": list(task.resolution),
            "detections": task.detections_file,
            "annotations": task.annotations_file,
        }
        if task.masks_dir is not None:
            rec["masks"] = task.masks_dir
        doc["tasks"].append(rec)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def dump_detections(detections: Iterable[Detection]) -> str:
    lines = []
    for det in sorted(detections, key=lambda d: (d.frame_index, d.hand_side, -d.confidence, d.bbox)):
        rec = {
            "frame": det.frame_index,
            "side": det.hand_side,
            "bbox": list(det.bbox),
            "conf": det.confidence,
        }
        if det.contact_state is not None:
            rec["contact"] = det.contact_state
        if det.object_bbox is not None:
            rec["obj_bbox"] = list(det.object_bbox)
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def dump_annotations(labels: Iterable[FrameLabel]) -> str:
    out = ["frame,side,interaction,role"]
    for lab in sorted(labels, key=lambda l: (l.frame_index, l.hand_side)):
        out.append(f"{lab.frame_index},{lab.hand_side},{int(lab.interaction)},{lab.role}")
    return "\n".join(out) + "\n"
