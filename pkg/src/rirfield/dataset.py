"""On-disk dataset layout: ``manifest.txt`` (one JSON record per line),
``rirs/<id>.wav`` (mono float32) and ``room.cfg`` (JSON room description)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .roomsim import ReceiverPose, RirRecord, ShoeboxRoom, SimConfig, SourcePose
from .signal import Waveform, read_wav, write_wav

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
DEFAULT_PROPORTIONS = (0.80, 0.05, 0.15)


class ValidationError(ValueError):
    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(f"{record_id}: {message}" if record_id else message)
        self.record_id = record_id


def _digest(samples: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(samples, dtype="<f4").tobytes()).hexdigest()


def _record_line(rec: RirRecord, samples: np.ndarray) -> str:
    return json.dumps({
        "id": rec.id,
        "source": {"position": list(rec.source.position),
                   "orientation": list(rec.source.orientation)},
        "receiver": {"position": list(rec.receiver.position)},
        "rir_path": rec.rir_path,
        "split": rec.split,
        "sample_rate": rec.sample_rate,
        "num_samples": int(len(samples)),
        "sha256": _digest(samples),
    })


def room_to_dict(room: ShoeboxRoom) -> dict:
    return {"dims": list(room.dims), "absorption": list(room.absorption),
            "speed_of_sound": room.speed_of_sound, "max_order": room.max_order}


def room_from_dict(d: dict) -> ShoeboxRoom:
    return ShoeboxRoom(tuple(d["dims"]), tuple(d["absorption"]),
                       d.get("speed_of_sound", 343.0), d.get("max_order"))


@dataclass
class Manifest:
    records: list[RirRecord]
    root: Path
    room: ShoeboxRoom | None = None
    sim_config: dict | None = None
    format_version: int = FORMAT_VERSION
    _checked: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    def by_id(self, rid: str) -> RirRecord:
        for r in self.records:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def split(self, name: str) -> list[RirRecord]:
        return [r for r in self.records if r.split == name]

    def load(self, rec: RirRecord | str) -> Waveform:
        """Read one waveform, checking sample rate, length and checksum."""
        if isinstance(rec, str):
            rec = self.by_id(rec)
        if rec.waveform is not None:
            return rec.waveform
        path = self.root / rec.rir_path
        if not path.exists():
            raise ValidationError(f"missing RIR file {rec.rir_path}", rec.id)
        try:
            w = read_wav(path)
        except ValueError as exc:
            raise ValidationError(str(exc), rec.id) from exc
        if w.sample_rate != rec.sample_rate:
            raise ValidationError(
                f"WAV sample rate {w.sample_rate} != manifest {rec.sample_rate}", rec.id)
        expect = self._checked.get(rec.id)
        if expect is not None:
            n, digest = expect
            if len(w) != n:
                raise ValidationError(f"length {len(w)} != manifest {n}", rec.id)
            if _digest(w.samples) != digest:
                raise ValidationError("checksum mismatch", rec.id)
        return w

    def waveforms(self, recs: Iterable[RirRecord] | None = None) -> list[Waveform]:
        return [self.load(r) for r in (self.records if recs is None else recs)]


def write_dataset(records: Sequence[RirRecord], directory, room: ShoeboxRoom | None = None,
                  sim_config: SimConfig | None = None) -> Manifest:
    """Write WAVs, ``manifest.txt`` and ``room.cfg``. Rewriting identical input is a no-op in content."""
    if len(records) == 0:
        raise ValueError("no records to write")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique")
    root = Path(directory)
    (root / "rirs").mkdir(parents=True, exist_ok=True)
    lines, out = [], []
    for rec in records:
        if rec.waveform is None:
            raise ValueError(f"record {rec.id} has no waveform")
        samples = np.asarray(rec.waveform.samples, dtype=np.float32)
        rel = f"rirs/{rec.id}.wav"
        write_wav(root / rel, Waveform(samples, rec.sample_rate))
        rec = replace(rec, rir_path=rel)
        lines.append(_record_line(rec, samples))
        out.append(replace(rec, waveform=None))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    cfg = {"format_version": FORMAT_VERSION,
           "room": room_to_dict(room) if room is not None else None,
           "sim_config": asdict(sim_config) if sim_config is not None else None}
    (root / "room.cfg").write_text(json.dumps(cfg, indent=2) + "\n")
    return read_dataset(root)


def _parse_record(line: str, lineno: int) -> tuple[RirRecord, int, str]:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest line {lineno}: {exc}") from exc
    rid = d.get("id")
    try:
        sr = d["sample_rate"]
        if not isinstance(sr, int) or isinstance(sr, bool) or sr <= 0:
            raise ValidationError(f"invalid sample_rate {sr!r}", rid)
        if d["split"] not in SPLITS:
            raise ValidationError(f"invalid split {d['split']!r}", rid)
        src = SourcePose(tuple(float(v) for v in d["source"]["position"]),
                         tuple(float(v) for v in d["source"]["orientation"]))
        rcv = ReceiverPose(tuple(float(v) for v in d["receiver"]["position"]))
        if len(src.position) != 3 or len(rcv.position) != 3 or len(src.orientation) != 2:
            raise ValidationError("malformed pose", rid)
        rec = RirRecord(rid, src, rcv, sr, d["split"], d["rir_path"])
        return rec, int(d["num_samples"]), d["sha256"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed manifest entry: {exc!r}", rid) from exc


def read_dataset(directory, verify: bool = True) -> Manifest:
    """Parse and validate a dataset directory; waveforms are loaded on demand."""
    root = Path(directory)
    mpath = root / "manifest.txt"
    if not mpath.exists():
        raise ValidationError(f"no manifest.txt in {root}")
    cfg_path = root / "room.cfg"
    cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    version = cfg.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported format version {version}")
    records, checked = [], {}
    for lineno, line in enumerate(mpath.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec, n, digest = _parse_record(line, lineno)
        if rec.id in checked:
            raise ValidationError("duplicate id", rec.id)
        if verify and not (root / rec.rir_path).exists():
            raise ValidationError(f"missing RIR file {rec.rir_path}", rec.id)
        checked[rec.id] = (n, digest)
        records.append(rec)
    room = room_from_dict(cfg["room"]) if cfg.get("room") else None
    return Manifest(records, root, room, cfg.get("sim_config"), version, checked)


def assign_splits(records: Sequence[RirRecord], proportions=DEFAULT_PROPORTIONS,
                  seed: int = 0) -> list[RirRecord]:
    """Seeded record-level split assignment; counts are rounded, test takes the remainder."""
    p = np.asarray(proportions, dtype=float)
    if p.shape != (3,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError(f"proportions must be three nonnegative values summing to 1, got {proportions}")
    n = len(records)
    n_train = int(round(p[0] * n))
    n_val = min(int(round(p[1] * n)), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_val]] = "val"
    tags[order[n_train + n_val:]] = "test"
    return [replace(r, split=str(t)) for r, t in zip(records, tags)]
