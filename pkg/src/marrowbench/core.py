"""Domain types, the cell-class taxonomy, and cohort file I/O."""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

# Laboratory analytes by LOINC code, in the canonical column order.
LAB_CODES: tuple[str, ...] = (
    "14804-9",  # lactate dehydrogenase
    "1743-4",  # alanine aminotransferase
    "20570-8",  # hematocrit
    "2160-0",  # creatinine
    "28539-5",  # MCH
    "28540-3",  # MCHC
    "30239-8",  # aspartate aminotransferase
    "30385-9",  # erythrocyte distribution width
    "30428-7",  # MCV
    "3084-1",  # urate
    "6690-2",  # leukocytes
    "714-6",  # eosinophils/100 leukocytes
    "718-7",  # hemoglobin
    "737-7",  # lymphocytes/100 leukocytes
    "744-3",  # monocytes/100 leukocytes
    "769-0",  # segmented neutrophils/100 leukocytes
    "777-3",  # platelets
    "789-8",  # erythrocytes
)

PATIENT_COLUMNS = ("patient_id", "age_lo", "age_hi", "sex", "leukemia_type", "leukemia_subtype", "split")
CLINICAL_DCC_PREFIX = "dcc:"
MAX_AGE = 19.0
NO_CONSENSUS_LABEL = "no consensus found"


class Sex(str, Enum):
    MALE = "male"
    FEMALE = "female"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str | None) -> "Sex":
        t = (text or "").strip().lower()
        aliases = {"m": "male", "f": "female", "": "unknown", "u": "unknown"}
        return cls(aliases.get(t, t))


class LeukemiaType(str, Enum):
    ALL = "ALL"
    AML = "AML"
    CML = "CML"


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"
    UNASSIGNED = "unassigned"


def normalize_name(name: str) -> str:
    """Case-folded, whitespace-collapsed key used for all class-name matching."""
    return " ".join(name.split()).casefold()


class UnknownClassError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unknown cell class name: {self.name!r}"


@dataclass(frozen=True)
class CellClassTree:
    """Annotation-time class hierarchy and its mapping onto the model classes.

    ``tree`` is a nested ``{"name": ..., "children": [...]}`` dict whose second
    level holds the model classes and whose leaves are the original labels.
    """

    model_classes: tuple[str, ...]
    mapping: Mapping[str, str]
    tree: Mapping = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if len(set(map(normalize_name, self.model_classes))) != len(self.model_classes):
            raise ValueError("model class names must be unique")
        known = {normalize_name(m) for m in self.model_classes}
        for orig, target in self.mapping.items():
            if normalize_name(target) not in known:
                raise ValueError(f"{orig!r} maps to unknown model class {target!r}")
        object.__setattr__(self, "_lookup", {normalize_name(k): v for k, v in self.mapping.items()})
        object.__setattr__(self, "_canon", {normalize_name(m): m for m in self.model_classes})
        object.__setattr__(self, "_index", {normalize_name(m): i for i, m in enumerate(self.model_classes)})

    @property
    def original_leaves(self) -> tuple[str, ...]:
        return tuple(self.mapping)

    def map_class(self, original: str) -> str:
        try:
            return self._canon[normalize_name(self._lookup[normalize_name(original)])]
        except KeyError:
            raise UnknownClassError(original) from None

    def model_class(self, name: str) -> str:
        """Canonical spelling of a model class name."""
        try:
            return self._canon[normalize_name(name)]
        except KeyError:
            raise UnknownClassError(name) from None

    def index(self, model_class: str) -> int:
        try:
            return self._index[normalize_name(model_class)]
        except KeyError:
            raise UnknownClassError(model_class) from None

    def to_model_class(self, name: str) -> str:
        """Accept either an original leaf or a model class name."""
        key = normalize_name(name)
        if key in self._lookup:
            return self.map_class(name)
        return self.model_class(name)

    def unmapped_model_classes(self) -> list[str]:
        hit = {normalize_name(v) for v in self.mapping.values()}
        return [m for m in self.model_classes if normalize_name(m) not in hit]

    def to_json(self) -> dict:
        return {"version": 1, "model_classes": list(self.model_classes),
                "mapping": dict(self.mapping), "tree": self.tree}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CellClassTree":
        return cls(tuple(obj["model_classes"]), dict(obj["mapping"]), obj.get("tree", {}))


@lru_cache(maxsize=1)
def default_taxonomy() -> CellClassTree:
    text = resources.files("marrowbench.resources").joinpath("taxonomy.json").read_text("utf-8")
    return CellClassTree.from_json(json.loads(text))


def map_class(original: str, taxonomy: CellClassTree | None = None) -> str:
    return (taxonomy or default_taxonomy()).map_class(original)


def model_classes() -> tuple[str, ...]:
    return default_taxonomy().model_classes


NUCLEATED_EXCLUDED = (
    "Artifact", "Not Identifiable", "Thrombocyte", "Giant Platelet",
    "Spicule", "Smudge Cell", "Neutrophil Extracellular Trap",
)


def nucleated_classes() -> tuple[str, ...]:
    excluded = {normalize_name(n) for n in NUCLEATED_EXCLUDED}
    return tuple(m for m in model_classes() if normalize_name(m) not in excluded)


@dataclass(frozen=True)
class AgeInterval:
    lo: float
    hi: float

    _BRACKET = re.compile(r"^\s*\[\s*([0-9.]+)\s*,\s*([0-9.]+)\s*\[\s*$")
    _DASH = re.compile(r"^\s*([0-9.]+)\s*-\s*([0-9.]+)\s*$")

    @classmethod
    def parse(cls, text: str) -> "AgeInterval":
        for pattern in (cls._BRACKET, cls._DASH):
            m = pattern.match(text)
            if m:
                return cls(float(m.group(1)), float(m.group(2)))
        raise ValueError(f"cannot parse age interval {text!r}")

    def problems(self) -> list[str]:
        out = []
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            out.append("age bounds must be finite")
        elif not self.lo < self.hi:
            out.append(f"age interval [{self.lo}, {self.hi}[ is empty")
        if self.lo < 0:
            out.append(f"age lower bound {self.lo} < 0")
        if self.hi > MAX_AGE:
            out.append(f"age upper bound {self.hi} > {MAX_AGE:g}")
        return out

    def __str__(self) -> str:
        return f"[{_fmt(self.lo)}, {_fmt(self.hi)}["


@dataclass(frozen=True)
class PatientRecord:
    id: str
    age: AgeInterval
    sex: Sex
    leukemia_type: LeukemiaType
    leukemia_subtype: str | None = None
    split: Split = Split.UNASSIGNED
    lab_values: Mapping[str, float] = field(default_factory=dict)
    clinical_dcc: Mapping[str, float] | None = None

    @property
    def stratum(self) -> tuple[str, str]:
        """Stratification key; subtype falls back to the type when absent."""
        sub = self.leukemia_subtype or self.leukemia_type.value
        return (self.leukemia_type.value, sub)

    def problems(self) -> list[str]:
        out = list(self.age.problems())
        extra = sorted(set(self.lab_values) - set(LAB_CODES))
        if extra:
            out.append(f"unknown lab value codes: {', '.join(extra)}")
        for code, v in self.lab_values.items():
            if not math.isfinite(v):
                out.append(f"lab value {code} is not finite")
        if self.clinical_dcc is not None:
            for name, pct in self.clinical_dcc.items():
                if not (0.0 <= pct <= 100.0):
                    out.append(f"clinical DCC {name!r} = {pct} outside [0, 100]")
        return out


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "BoundingBox":
        if len(xs) != 4:
            raise ValueError(f"bbox needs 4 numbers, got {len(xs)}")
        return cls(*(float(v) for v in xs))


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    patient_id: str
    roi_id: str
    bbox: BoundingBox
    consensus_label: str | None = None


@dataclass(frozen=True)
class Issue:
    kind: str  # "dangling_reference" | "duplicate_id" | "invariant"
    subject: str
    message: str


def validate_cohort(patients: Iterable[PatientRecord], cells: Iterable[CellRecord]) -> list[Issue]:
    """Collect every structural problem of a cohort; an empty list means well-formed."""
    report: list[Issue] = []
    seen: set[str] = set()
    for p in patients:
        if p.id in seen:
            report.append(Issue("duplicate_id", p.id, f"duplicate patient id {p.id!r}"))
        seen.add(p.id)
        for msg in p.problems():
            report.append(Issue("invariant", p.id, msg))
    seen_cells: set[str] = set()
    for c in cells:
        if c.cell_id in seen_cells:
            report.append(Issue("duplicate_id", c.cell_id, f"duplicate cell id {c.cell_id!r}"))
        seen_cells.add(c.cell_id)
        if c.patient_id not in seen:
            report.append(Issue("dangling_reference", c.cell_id,
                                f"cell {c.cell_id!r} references unknown patient {c.patient_id!r}"))
    return report


# ---------------------------------------------------------------- file formats

class SchemaError(ValueError):
    """Input file does not follow its declared layout."""


def _fmt(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def _num(text: str) -> float | None:
    text = text.strip()
    return None if text == "" else float(text)


def write_patients_csv(patients: Sequence[PatientRecord], fh: io.TextIOBase) -> None:
    dcc_names: list[str] = []
    for p in patients:
        for name in p.clinical_dcc or {}:
            if name not in dcc_names:
                dcc_names.append(name)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([*PATIENT_COLUMNS, *LAB_CODES, *(CLINICAL_DCC_PREFIX + n for n in dcc_names)])
    for p in patients:
        dcc = p.clinical_dcc
        w.writerow([
            p.id, _fmt(p.age.lo), _fmt(p.age.hi), p.sex.value, p.leukemia_type.value,
            p.leukemia_subtype or "", p.split.value,
            *(repr(p.lab_values[c]) if c in p.lab_values else "" for c in LAB_CODES),
            *((repr(dcc[n]) if dcc is not None and n in dcc else "") for n in dcc_names),
        ])


def read_patients_csv(fh: io.TextIOBase) -> list[PatientRecord]:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("patients.csv is empty") from None
    if tuple(header[: len(PATIENT_COLUMNS)]) != PATIENT_COLUMNS:
        raise SchemaError(f"patients.csv header must start with {','.join(PATIENT_COLUMNS)}")
    rest = header[len(PATIENT_COLUMNS):]
    lab_cols = [c for c in rest if not c.startswith(CLINICAL_DCC_PREFIX)]
    if lab_cols != list(LAB_CODES):
        raise SchemaError("patients.csv must carry the 18 LOINC columns in canonical order")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"patients.csv line {lineno}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        try:
            labs = {c: v for c in LAB_CODES if (v := _num(rec[c])) is not None}
            dcc_cols = [c for c in rest if c.startswith(CLINICAL_DCC_PREFIX)]
            dcc = {c[len(CLINICAL_DCC_PREFIX):]: v for c in dcc_cols if (v := _num(rec[c])) is not None}
            out.append(PatientRecord(
                id=rec["patient_id"],
                age=AgeInterval(float(rec["age_lo"]), float(rec["age_hi"])),
                sex=Sex.parse(rec["sex"]),
                leukemia_type=LeukemiaType(rec["leukemia_type"].strip()),
                leukemia_subtype=rec["leukemia_subtype"] or None,
                split=Split(rec["split"].strip() or "unassigned"),
                lab_values=labs,
                clinical_dcc=dcc or None,
            ))
        except ValueError as exc:
            raise SchemaError(f"patients.csv line {lineno}: {exc}") from exc
    return out


def write_cells_jsonl(cells: Sequence[CellRecord], fh: io.TextIOBase) -> None:
    for c in cells:
        obj = {"cell_id": c.cell_id, "patient_id": c.patient_id, "roi_id": c.roi_id,
               "bbox": c.bbox.as_list()}
        if c.consensus_label is not None:
            obj["consensus_label"] = c.consensus_label
        fh.write(json.dumps(obj) + "\n")


def iter_jsonl(fh: io.TextIOBase, name: str = "input"):
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{name} line {lineno}: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise SchemaError(f"{name} line {lineno}: expected a JSON object")
        yield lineno, obj


def read_cells_jsonl(fh: io.TextIOBase) -> list[CellRecord]:
    out = []
    for lineno, obj in iter_jsonl(fh, "cells.jsonl"):
        try:
            out.append(CellRecord(
                cell_id=str(obj["cell_id"]), patient_id=str(obj["patient_id"]),
                roi_id=str(obj["roi_id"]), bbox=BoundingBox.from_list(obj["bbox"]),
                consensus_label=obj.get("consensus_label"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"cells.jsonl line {lineno}: {exc}") from exc
    return out


def load_patients(path: str | Path) -> list[PatientRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return read_patients_csv(fh)


def load_cells(path: str | Path) -> list[CellRecord]:
    with open(path, encoding="utf-8") as fh:
        return read_cells_jsonl(fh)
