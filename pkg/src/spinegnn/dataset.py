"""Corpus reading and writing.

The internal format is a single JSON document:
{"scans": [{"id", "split", "provenance", "keypoints": [{"pos": [x, y, z],
"kind", "level", "legitimate", "segment_probs", "source_id"}]}]}.
Positions are mm floats at full precision and keys are written in a fixed
order, so saving the same corpus twice is byte-identical. An adapter for
externally published keypoint files maps fields via a configuration dict.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spine import Keypoint, KeypointType, LEVEL_NAMES, level_from_name, level_name

SPLITS = ("train", "val", "test")
PROVENANCES = ("synthetic", "external")


class CorpusFormatError(ValueError):
    pass


@dataclass
class ScanRecord:
    scan_id: str
    keypoints: list[Keypoint]
    provenance: str = "synthetic"
    split: str = "train"

    def legitimate_bodies(self) -> list[Keypoint]:
        return [kp for kp in self.keypoints
                if kp.kind == KeypointType.BODY and kp.legitimate]


@dataclass
class Corpus:
    records: list[ScanRecord] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split_sizes(self) -> dict[str, int]:
        counts = Counter(r.split for r in self.records)
        return {split: counts.get(split, 0) for split in SPLITS}

    def level_histogram(self) -> dict[str, int]:
        counts: Counter = Counter()
        for record in self.records:
            for kp in record.legitimate_bodies():
                if kp.level is not None:
                    counts[level_name(kp.level)] += 1
        return {name: counts.get(name, 0) for name in LEVEL_NAMES}

    def subset(self, split: str) -> "Corpus":
        return Corpus(records=[r for r in self.records if r.split == split])


def _keypoint_to_dict(kp: Keypoint) -> dict:
    return {
        "pos": [float(x) for x in kp.position],
        "kind": kp.kind.name.lower(),
        "level": None if kp.level is None else level_name(kp.level),
        "legitimate": bool(kp.legitimate),
        "segment_probs": [float(p) for p in kp.segment_probs],
        "source_id": kp.source_id,
    }


def _parse_keypoint(d: dict, where: str) -> Keypoint:
    if not isinstance(d, dict):
        raise CorpusFormatError(f"{where}: keypoint entry is not an object")
    pos = d.get("pos")
    if not isinstance(pos, (list, tuple)) or len(pos) != 3:
        raise CorpusFormatError(f"{where}: missing or malformed position")
    try:
        position = np.array([float(x) for x in pos])
    except (TypeError, ValueError):
        raise CorpusFormatError(f"{where}: non-numeric position") from None
    if not np.isfinite(position).all():
        raise CorpusFormatError(f"{where}: non-finite position")
    kind_str = d.get("kind")
    try:
        kind = KeypointType[str(kind_str).upper()]
    except KeyError:
        raise CorpusFormatError(f"{where}: unknown keypoint type {kind_str!r}") from None
    level = d.get("level")
    if level is not None:
        try:
            level = level_from_name(str(level))
        except ValueError as exc:
            raise CorpusFormatError(f"{where}: {exc}") from None
    probs = d.get("segment_probs", [0.0, 0.0, 0.0, 0.0])
    if not isinstance(probs, (list, tuple)) or len(probs) != 4:
        raise CorpusFormatError(f"{where}: segment_probs must have 4 entries")
    probs = np.array([float(p) for p in probs])
    if ((probs < 0) | (probs > 1)).any():
        raise CorpusFormatError(f"{where}: segment_probs outside [0, 1]")
    return Keypoint(position=position, kind=kind, level=level,
                    legitimate=bool(d.get("legitimate", True)),
                    segment_probs=probs, source_id=d.get("source_id"))


def _validate_scan(record: ScanRecord, where: str) -> None:
    seen_levels: set[int] = set()
    for kp in record.legitimate_bodies():
        if kp.level is None:
            continue
        if kp.level in seen_levels:
            raise CorpusFormatError(
                f"{where}: duplicate level {level_name(kp.level)} among legitimate bodies")
        seen_levels.add(kp.level)


def _parse_scan(d: dict, where: str) -> ScanRecord:
    if not isinstance(d, dict):
        raise CorpusFormatError(f"{where}: scan entry is not an object")
    scan_id = d.get("id")
    if not isinstance(scan_id, str) or not scan_id:
        raise CorpusFormatError(f"{where}: missing scan id")
    split = d.get("split", "train")
    if split not in SPLITS:
        raise CorpusFormatError(f"scan {scan_id}: unknown split {split!r}")
    provenance = d.get("provenance", "synthetic")
    if provenance not in PROVENANCES:
        raise CorpusFormatError(f"scan {scan_id}: unknown provenance {provenance!r}")
    raw_kps = d.get("keypoints")
    if not isinstance(raw_kps, list):
        raise CorpusFormatError(f"scan {scan_id}: keypoints must be a list")
    keypoints = [_parse_keypoint(kp, f"scan {scan_id}, keypoint {i}")
                 for i, kp in enumerate(raw_kps)]
    record = ScanRecord(scan_id=scan_id, keypoints=keypoints,
                        provenance=provenance, split=split)
    _validate_scan(record, f"scan {scan_id}")
    return record


# field mapping for externally published keypoint files; override per dataset
DEFAULT_EXTERNAL_MAPPING = {
    "scans": "scans",
    "scan_id": "name",
    "keypoints": "landmarks",
    "position": "position",
    "kind": "type",
    "level": "label",
    "kind_values": {"vertebra_body": "body", "pedicle_left": "left_pedicle",
                    "pedicle_right": "right_pedicle"},
}


def _parse_external(payload: dict, mapping: dict) -> list[dict]:
    """Rewrite an external keypoint document into internal scan dicts."""
    m = dict(DEFAULT_EXTERNAL_MAPPING)
    m.update(mapping or {})
    scans = payload.get(m["scans"])
    if not isinstance(scans, list):
        raise CorpusFormatError(f"external file: missing {m['scans']!r} list")
    internal = []
    for scan in scans:
        kps = []
        for kp in scan.get(m["keypoints"], []):
            kind = kp.get(m["kind"])
            kps.append({
                "pos": kp.get(m["position"]),
                "kind": m["kind_values"].get(kind, kind),
                "level": kp.get(m["level"]),
                "legitimate": kp.get("legitimate", True),
                "segment_probs": kp.get("segment_probs", [0.0, 0.0, 0.0, 0.0]),
            })
        internal.append({"id": scan.get(m["scan_id"]), "split": scan.get("split", "train"),
                         "provenance": "external", "keypoints": kps})
    return internal


def load_corpus(path: str | Path, format: str = "internal_json",
                external_mapping: dict | None = None) -> Corpus:
    """Load and validate a corpus; malformed scans are skipped with diagnostics.

    A file that cannot be parsed at all raises CorpusFormatError. Individual
    bad records never raise: they are reported in `corpus.diagnostics` as
    "scan <id>: <reason>" strings.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"cannot read corpus {path}: {exc}") from None
    if not isinstance(payload, dict):
        raise CorpusFormatError(f"{path}: top level must be an object")

    if format == "internal_json":
        raw_scans = payload.get("scans")
        if not isinstance(raw_scans, list):
            raise CorpusFormatError(f"{path}: missing 'scans' list")
    elif format == "external_keypoints":
        raw_scans = _parse_external(payload, external_mapping or {})
    else:
        raise ValueError(f"unknown corpus format {format!r}")

    corpus = Corpus()
    seen_ids: set[str] = set()
    for i, raw in enumerate(raw_scans):
        try:
            record = _parse_scan(raw, f"scan #{i}")
            if record.scan_id in seen_ids:
                raise CorpusFormatError(f"scan {record.scan_id}: duplicate scan id")
            seen_ids.add(record.scan_id)
            corpus.records.append(record)
        except CorpusFormatError as exc:
            corpus.diagnostics.append(str(exc))
    return corpus


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write canonical JSON: fixed key order, full-precision floats."""
    payload = {
        "scans": [
            {
                "id": r.scan_id,
                "split": r.split,
                "provenance": r.provenance,
                "keypoints": [_keypoint_to_dict(kp) for kp in r.keypoints],
            }
            for r in corpus.records
        ]
    }
    path = Path(path)
    try:
        path.write_text(json.dumps(payload, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write corpus to {path}: {exc}") from exc
