"""CHAIR and POPE scoring over JSON Lines inputs.

Object mentions are found by exact, longest-first matching of vocabulary
surface forms on lowercase alphanumeric tokens, then mapped to canonical
labels. Each caption contributes the set of labels it mentions.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

log = logging.getLogger(__name__)

POPE_SETTINGS = ("random", "popular", "adversarial")

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class DataError(ValueError):
    """Malformed or inconsistent evaluation input."""


class SynonymTable:
    """Surface form -> canonical label, with canonical labels mapping to
    themselves. Surface forms are normalised to space-joined tokens."""

    def __init__(self, mapping: Mapping[str, str]):
        table: dict[tuple[str, ...], str] = {}
        for surface, canonical in mapping.items():
            key = tuple(tokenize(surface))
            if not key:
                raise DataError(f"surface form {surface!r} has no alphanumeric tokens")
            if not isinstance(canonical, str) or not canonical.strip():
                raise DataError(f"canonical label for {surface!r} must be a non-empty string")
            canonical = canonical.strip().lower()
            if table.get(key, canonical) != canonical:
                raise DataError(f"surface form {surface!r} maps to both {table[key]!r} and {canonical!r}")
            table[key] = canonical
        for canonical in set(table.values()):
            key = tuple(tokenize(canonical))
            if key and table.setdefault(key, canonical) != canonical:
                raise DataError(f"canonical label {canonical!r} is also a surface form of {table[key]!r}")
        if not table:
            raise DataError("vocabulary is empty")
        self._table = table
        self.max_len = max(len(k) for k in table)

    @classmethod
    def load(cls, path=None) -> "SynonymTable":
        """Read a JSON object of surface forms; ``None`` loads the bundled table."""
        if path is None:
            text = resources.files("sadi").joinpath("data/synonyms.json").read_text()
        else:
            text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path or 'bundled synonyms'}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise DataError("synonym file must be a JSON object")
        return cls(doc)

    def canonical(self, label: str) -> str:
        """Canonical form of an annotation label (unknown labels are kept as-is)."""
        key = tuple(tokenize(label))
        return self._table.get(key, " ".join(key) if key else label.strip().lower())

    def get(self, tokens: tuple[str, ...]) -> Optional[str]:
        return self._table.get(tokens)

    def __len__(self) -> int:
        return len(self._table)


def extract_objects(caption: str, vocabulary: SynonymTable) -> set[str]:
    """Canonical labels mentioned in ``caption``.

    At each position the longest matching surface form wins and its tokens
    are consumed, so "hot dog" never also yields "dog".
    """
    tokens = tokenize(caption)
    found = set()
    i = 0
    while i < len(tokens):
        for n in range(min(vocabulary.max_len, len(tokens) - i), 0, -1):
            label = vocabulary.get(tuple(tokens[i:i + n]))
            if label is not None:
                found.add(label)
                i += n
                break
        else:
            i += 1
    return found


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    objects: frozenset


@dataclass
class ChairResult:
    c_s: float
    c_i: float
    f1: float
    f1_micro: float
    n_captions: int
    n_hal_captions: int
    n_objects_mentioned: int
    n_hal_objects: int

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(tp: int, fp: int, fn: int) -> float:
    # 2PR/(P+R) written over counts; 0 when nothing is predicted or present
    return _ratio(2 * tp, 2 * tp + fp + fn)


def chair_scores(captions: Sequence[CaptionRecord], annotations: Iterable[AnnotationRecord],
                 vocabulary: SynonymTable) -> ChairResult:
    """Sentence- and instance-level hallucination rates plus caption F1.

    F1 compares each caption's mentioned set with its image's ground truth.
    ``f1`` is the mean of the per-caption scores; ``f1_micro`` pools the
    counts over the corpus first.
    """
    truth: dict[str, frozenset] = {}
    for ann in annotations:
        labels = frozenset(vocabulary.canonical(o) for o in ann.objects)
        truth[ann.image_id] = truth.get(ann.image_id, frozenset()) | labels
    n_hal_caps = n_mentions = n_hal = 0
    f1_sum = 0.0
    tp_all = fp_all = fn_all = 0
    for rec in captions:
        if rec.image_id not in truth:
            raise DataError(f"no annotation for image_id {rec.image_id!r}")
        gt = truth[rec.image_id]
        mentioned = extract_objects(rec.caption, vocabulary)
        hallucinated = len(mentioned - gt)
        tp = len(mentioned & gt)
        fn = len(gt - mentioned)
        n_mentions += len(mentioned)
        n_hal += hallucinated
        n_hal_caps += hallucinated > 0
        f1_sum += _f1(tp, hallucinated, fn)
        tp_all += tp
        fp_all += hallucinated
        fn_all += fn
    n = len(captions)
    return ChairResult(
        c_s=_ratio(n_hal_caps, n),
        c_i=_ratio(n_hal, n_mentions),
        f1=f1_sum / n if n else 0.0,
        f1_micro=_f1(tp_all, fp_all, fn_all),
        n_captions=n,
        n_hal_captions=n_hal_caps,
        n_objects_mentioned=n_mentions,
        n_hal_objects=n_hal,
    )


@dataclass(frozen=True)
class PopeRecord:
    question_id: str
    setting: str
    label: str
    answer: str


def is_yes(text: str) -> bool:
    return text.lower().strip().startswith("yes")


@dataclass
class PopeScores:
    precision: float
    recall: float
    f1: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int


def pope_f1(records: Iterable[PopeRecord]) -> dict:
    """Per-setting precision/recall/F1/accuracy with "yes" as the positive
    class, and the unweighted mean F1 over settings that have records.

    Returns ``{"settings": {name: PopeScores}, "average_f1": float,
    "missing": [names]}``.
    """
    counts = {s: [0, 0, 0, 0] for s in POPE_SETTINGS}  # tp, fp, fn, tn
    seen = set()
    for rec in records:
        if rec.setting not in counts:
            raise DataError(f"question {rec.question_id!r}: unknown setting {rec.setting!r}")
        truth = is_yes(rec.label)
        pred = is_yes(rec.answer)
        if pred:
            cell = 0 if truth else 1
        else:
            cell = 2 if truth else 3
        counts[rec.setting][cell] += 1
        seen.add(rec.setting)
    settings = {}
    for name in POPE_SETTINGS:
        if name not in seen:
            continue
        tp, fp, fn, tn = counts[name]
        settings[name] = PopeScores(
            precision=_ratio(tp, tp + fp),
            recall=_ratio(tp, tp + fn),
            f1=_f1(tp, fp, fn),
            accuracy=_ratio(tp + tn, tp + fp + fn + tn),
            tp=tp, fp=fp, fn=fn, tn=tn,
        )
    missing = [s for s in POPE_SETTINGS if s not in seen]
    for name in missing:
        log.warning("POPE setting %r has no records; left out of the average", name)
    if not settings:
        raise DataError("no POPE records")
    average = sum(s.f1 for s in settings.values()) / len(settings)
    return {"settings": settings, "average_f1": average, "missing": missing}


def _read_jsonl(path, required: dict) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            for key, kind in required.items():
                if not isinstance(obj.get(key), kind):
                    raise DataError(f"{path}:{lineno}: field {key!r} missing or not {kind.__name__}")
            rows.append(obj)
    return rows


def load_captions(path) -> list[CaptionRecord]:
    rows = _read_jsonl(path, {"image_id": str, "caption": str})
    for i, r in enumerate(rows):
        if not r["image_id"]:
            raise DataError(f"{path}: record {i} has an empty image_id")
    return [CaptionRecord(r["image_id"], r["caption"]) for r in rows]


def load_annotations(path) -> list[AnnotationRecord]:
    rows = _read_jsonl(path, {"image_id": str, "objects": list})
    out = []
    for r in rows:
        if not all(isinstance(o, str) and o.strip() for o in r["objects"]):
            raise DataError(f"{path}: image {r['image_id']!r} has a non-string or empty label")
        out.append(AnnotationRecord(r["image_id"], frozenset(r["objects"])))
    return out


def load_pope(path) -> list[PopeRecord]:
    rows = _read_jsonl(path, {"question_id": str, "setting": str, "label": str, "answer": str})
    out = []
    for r in rows:
        if r["setting"] not in POPE_SETTINGS:
            raise DataError(f"{path}: question {r['question_id']!r}: unknown setting {r['setting']!r}")
        if r["label"].strip().lower() not in ("yes", "no"):
            raise DataError(f"{path}: question {r['question_id']!r}: label must be yes or no")
        out.append(PopeRecord(r["question_id"], r["setting"], r["label"], r["answer"]))
    return out
