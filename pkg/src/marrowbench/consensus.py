"""Replayable consensus-labeling state machine and annotation-stream statistics.

A cell is labeled by successive observers until at least two observations
exist and a unique most frequent label holds at least half of them.
"""
from __future__ import annotations

import json
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .core import NO_CONSENSUS_LABEL, CellClassTree, SchemaError, UnknownClassError, iter_jsonl, normalize_name

DEFAULT_MAX_OBSERVERS = 5


class View(str, Enum):
    LABELING = "labeling"
    VALIDATION = "validation"


@dataclass(frozen=True)
class Observation:
    cell_id: str
    observer_id: str
    label: str
    seq: int
    view: View = View.LABELING
    duration_s: float | None = None


class State(str, Enum):
    PENDING = "pending"
    CONSENSUS = "consensus"
    NO_CONSENSUS = "no_consensus"


@dataclass(frozen=True)
class ConsensusStatus:
    state: State
    n_obs: int
    label: str | None = None

    @property
    def terminal(self) -> bool:
        return self.state is not State.PENDING


class ConsensusError(ValueError):
    def __init__(self, cell_id: str, message: str):
        super().__init__(f"cell {cell_id!r}: {message}")
        self.cell_id = cell_id


def _check_cell(observations: Sequence[Observation]) -> None:
    cell = observations[0].cell_id
    seen: set[str] = set()
    for expected, obs in enumerate(observations, start=1):
        if obs.cell_id != cell:
            raise ConsensusError(cell, f"observation for {obs.cell_id!r} mixed into this cell")
        if obs.seq != expected:
            raise ConsensusError(cell, f"seq must run 1, 2, ... without gaps; got {obs.seq} at position {expected}")
        # A validation-view correction by an earlier observer counts as a new observation.
        if obs.observer_id in seen and obs.view is View.LABELING:
            raise ConsensusError(cell, f"observer {obs.observer_id!r} labeled this cell twice")
        seen.add(obs.observer_id)


def _decide(labels: Sequence[str], max_observers: int) -> ConsensusStatus:
    n = len(labels)
    counts = Counter(normalize_name(l) for l in labels)
    if n >= 2:
        (top, top_count), *rest = counts.most_common()
        unique = not rest or rest[0][1] < top_count
        if unique and 2 * top_count >= n:
            first_spelling = next(l for l in labels if normalize_name(l) == top)
            return ConsensusStatus(State.CONSENSUS, n, first_spelling)
    if n >= max_observers:
        return ConsensusStatus(State.NO_CONSENSUS, n)
    return ConsensusStatus(State.PENDING, n)


def consensus_status(observations: Sequence[Observation], max_observers: int = DEFAULT_MAX_OBSERVERS) -> ConsensusStatus:
    """Fold the rule over one cell's observations in seq order.

    Consensus and no-consensus are absorbing: observations after the first
    decisive prefix do not change the status.
    """
    if max_observers < 2:
        raise ValueError("max_observers must be >= 2")
    if not observations:
        return ConsensusStatus(State.PENDING, 0)
    _check_cell(observations)
    labels = [o.label for o in observations]
    for k in range(1, len(labels) + 1):
        status = _decide(labels[:k], max_observers)
        if status.terminal:
            return status
    return status


def group_by_cell(observations: Iterable[Observation]) -> dict[str, list[Observation]]:
    cells: dict[str, list[Observation]] = defaultdict(list)
    for obs in observations:
        cells[obs.cell_id].append(obs)
    for cell_id, obs in cells.items():
        obs.sort(key=lambda o: o.seq)
        seqs = [o.seq for o in obs]
        if len(set(seqs)) != len(seqs):
            raise ConsensusError(cell_id, "duplicate seq values")
    return dict(cells)


def resolve_stream(observations: Iterable[Observation], max_observers: int = DEFAULT_MAX_OBSERVERS) -> dict[str, ConsensusStatus]:
    grouped = group_by_cell(observations)
    return {cell: consensus_status(grouped[cell], max_observers) for cell in sorted(grouped)}


@dataclass(frozen=True)
class AnnotationStats:
    """Fractions are exact rationals over the decided (non-pending) cells."""

    n_cells: int
    n_pending: int
    frac_consensus_at_2: Fraction
    frac_consensus_at_3: Fraction
    frac_consensus_later: Fraction
    frac_none: Fraction
    correction_rate_overall: Fraction
    correction_rate_among_disagreeing: Fraction
    median_time_labeling: float | None = None
    median_time_validation: float | None = None

    def to_json(self) -> dict:
        out = {k: (float(v) if isinstance(v, Fraction) else v) for k, v in self.__dict__.items()}
        return out


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def annotation_stats(observations: Iterable[Observation], statuses: Mapping[str, ConsensusStatus]) -> AnnotationStats:
    grouped = group_by_cell(observations)
    decided = [c for c in sorted(statuses) if statuses[c].terminal]
    n = len(decided)
    at = Counter()
    corrected = disagreeing = corrected_disagreeing = 0
    for cell in decided:
        st = statuses[cell]
        obs = grouped.get(cell, [])
        if st.state is State.NO_CONSENSUS:
            at["none"] += 1
        else:
            at[2 if st.n_obs == 2 else 3 if st.n_obs == 3 else "later"] += 1
        first_two_differ = len(obs) >= 2 and normalize_name(obs[0].label) != normalize_name(obs[1].label)
        disagreeing += first_two_differ
        if st.state is State.CONSENSUS and normalize_name(st.label) != normalize_name(obs[0].label):
            corrected += 1
            corrected_disagreeing += first_two_differ
    lab, val = median_label_time(o for obs in grouped.values() for o in obs)
    return AnnotationStats(
        n_cells=n,
        n_pending=len(statuses) - n,
        frac_consensus_at_2=_ratio(at[2], n),
        frac_consensus_at_3=_ratio(at[3], n),
        frac_consensus_later=_ratio(at["later"], n),
        frac_none=_ratio(at["none"], n),
        correction_rate_overall=_ratio(corrected, n),
        correction_rate_among_disagreeing=_ratio(corrected_disagreeing, disagreeing),
        median_time_labeling=lab,
        median_time_validation=val,
    )


def median_label_time(observations: Iterable[Observation]) -> tuple[float | None, float | None]:
    """Per-view median labeling duration; None for a view without timed observations."""
    by_view: dict[View, list[float]] = {View.LABELING: [], View.VALIDATION: []}
    for o in observations:
        if o.duration_s is not None:
            by_view[o.view].append(float(o.duration_s))
    return tuple(statistics.median(v) if v else None for v in by_view.values())  # type: ignore[return-value]


# ------------------------------------------------------------------ file I/O

def read_observations(fh) -> list[Observation]:
    out = []
    for lineno, obj in iter_jsonl(fh, "observations.jsonl"):
        try:
            out.append(Observation(
                cell_id=str(obj["cell_id"]), observer_id=str(obj["observer_id"]),
                label=str(obj["label"]), seq=int(obj["seq"]),
                view=View(obj.get("view", "labeling")),
                duration_s=None if obj.get("duration_s") is None else float(obj["duration_s"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"observations.jsonl line {lineno}: {exc}") from exc
    return out


def write_observations(observations: Iterable[Observation], fh) -> None:
    for o in observations:
        obj = {"cell_id": o.cell_id, "observer_id": o.observer_id, "label": o.label,
               "seq": o.seq, "view": o.view.value}
        if o.duration_s is not None:
            obj["duration_s"] = o.duration_s
        fh.write(json.dumps(obj) + "\n")


def status_records(statuses: Mapping[str, ConsensusStatus], taxonomy: CellClassTree | None = None) -> list[dict]:
    """Export rows; undecided-after-max cells carry the no-consensus sentinel label."""
    rows = []
    for cell in sorted(statuses):
        st = statuses[cell]
        row = {"cell_id": cell, "status": st.state.value, "n_obs": st.n_obs}
        if st.state is State.CONSENSUS:
            row["label"] = st.label
            if taxonomy is not None:
                try:
                    row["model_label"] = taxonomy.to_model_class(st.label)
                except UnknownClassError:
                    row["model_label"] = None
        elif st.state is State.NO_CONSENSUS:
            row["label"] = NO_CONSENSUS_LABEL
        else:
            row["label"] = None
        rows.append(row)
    return rows
