"""Episodic treatment-log data model: transitions, episodes, datasets, I/O.

A dataset is a patient-keyed collection of episodes. Each episode is an
ordered sequence of transitions (one per 4-hour window) and terminates in
discharge or death. Transitions carry a fixed-dimension physiological
feature vector plus the doses administered over the window.

CSV wire format (header required, exact names)::

    patient_id,step_index,terminal,clinical_label,fluid_ml,vis,f_0,...,f_{d-1}

``terminal`` is one of ``none``/``discharge``/``death``; ``clinical_label``
one of ``non_sepsis``/``sepsis``/``septic_shock`` (empty defaults to
``non_sepsis``). JSONL uses the same field names with ``features`` as an
array. UTF-8, LF line endings.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError


class Terminal(enum.Enum):
    NONE = "none"
    DISCHARGE = "discharge"
    DEATH = "death"


class ClinicalLabel(enum.Enum):
    NON_SEPSIS = "non_sepsis"
    SEPSIS = "sepsis"
    SEPTIC_SHOCK = "septic_shock"


LABEL_ORDER = (ClinicalLabel.NON_SEPSIS, ClinicalLabel.SEPSIS, ClinicalLabel.SEPTIC_SHOCK)

FIXED_COLUMNS = ("patient_id", "step_index", "terminal", "clinical_label", "fluid_ml", "vis")


@dataclass(frozen=True, eq=False)
class Transition:
    """One clinician decision step within a patient's stay."""

    patient_id: str
    step_index: int
    features: np.ndarray
    fluid_ml: float
    vis: float
    clinical_label: ClinicalLabel = ClinicalLabel.NON_SEPSIS
    terminal: Terminal = Terminal.NONE


@dataclass(frozen=True, eq=False)
class Episode:
    """All transitions of one patient, in step order."""

    patient_id: str
    transitions: tuple[Transition, ...]

    @property
    def outcome(self) -> Terminal:
        return self.transitions[-1].terminal

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Patient-keyed episode collection with a shared feature dimension.

    Iteration order over patients is canonical (sorted by patient_id), so
    every downstream seeded computation is independent of input row order.
    """

    episodes: dict[str, Episode]
    n_features: int
    feature_names: tuple[str, ...]

    @property
    def patient_ids(self) -> list[str]:
        return sorted(self.episodes)

    def iter_episodes(self) -> Iterator[Episode]:
        for pid in self.patient_ids:
            yield self.episodes[pid]

    @property
    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes.values())


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" | "warning"
    message: str


@dataclass(frozen=True)
class ValidationReport:
    n_episodes: int
    n_transitions: int
    outcome_counts: dict[str, int]
    nan_counts: dict[str, int]
    issues: tuple[Issue, ...]

    @property
    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]

    @property
    def warnings(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "warning"]

    @property
    def ok(self) -> bool:
        return not self.errors


def default_feature_names(d: int) -> tuple[str, ...]:
    return tuple(f"f_{i}" for i in range(d))


def make_dataset(episodes: Iterable[Episode], feature_names: Sequence[str] | None = None) -> Dataset:
    """Assemble a Dataset container; invariants are checked by validate_dataset."""
    by_id: dict[str, Episode] = {}
    d = -1
    for ep in episodes:
        if ep.patient_id in by_id:
            raise DataError(f"duplicate patient_id {ep.patient_id!r}")
        by_id[ep.patient_id] = ep
        if d < 0 and ep.transitions:
            d = len(ep.transitions[0].features)
    if d < 0:
        d = 0
    names = tuple(feature_names) if feature_names is not None else default_feature_names(d)
    if len(names) != d:
        raise DataError(f"feature_names length {len(names)} != dimension {d}")
    return Dataset(episodes=by_id, n_features=d, feature_names=names)


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every structural invariant; violations become report entries."""
    issues: list[Issue] = []
    outcome_counts = {"discharge": 0, "death": 0, "none": 0}
    nan_counts = {name: 0 for name in dataset.feature_names}
    n_transitions = 0

    for pid in dataset.patient_ids:
        ep = dataset.episodes[pid]
        if not ep.transitions:
            issues.append(Issue("error", f"patient {pid}: empty episode"))
            outcome_counts["none"] += 1
            continue
        last_step = None
        for i, tr in enumerate(ep.transitions):
            n_transitions += 1
            if tr.patient_id != pid:
                issues.append(Issue("error", f"patient {pid}: transition carries id {tr.patient_id!r}"))
            if tr.step_index < 0:
                issues.append(Issue("error", f"patient {pid}: negative step_index {tr.step_index}"))
            if last_step is not None and tr.step_index <= last_step:
                issues.append(
                    Issue("error", f"patient {pid}: step_index not strictly increasing at {tr.step_index}")
                )
            last_step = tr.step_index
            if len(tr.features) != dataset.n_features:
                issues.append(
                    Issue(
                        "error",
                        f"patient {pid} step {tr.step_index}: feature dimension "
                        f"{len(tr.features)} != {dataset.n_features}",
                    )
                )
            else:
                bad = np.isnan(np.asarray(tr.features, dtype=float))
                for j in np.nonzero(bad)[0]:
                    nan_counts[dataset.feature_names[j]] += 1
            if tr.fluid_ml < 0 or tr.vis < 0:
                issues.append(Issue("error", f"patient {pid} step {tr.step_index}: negative dose"))
            is_last = i == len(ep.transitions) - 1
            if tr.terminal is not Terminal.NONE and not is_last:
                issues.append(Issue("error", f"patient {pid} step {tr.step_index}: terminal before end"))
            if is_last and tr.terminal is Terminal.NONE:
                issues.append(Issue("error", f"patient {pid}: episode does not terminate"))
        outcome_counts[ep.outcome.value] += 1

    for name, cnt in nan_counts.items():
        if cnt:
            issues.append(Issue("warning", f"feature {name}: {cnt} NaN values"))

    return ValidationReport(
        n_episodes=len(dataset.episodes),
        n_transitions=n_transitions,
        outcome_counts=outcome_counts,
        nan_counts={k: v for k, v in nan_counts.items() if v},
        issues=tuple(issues),
    )


# --- parsing ---------------------------------------------------------------


def _parse_terminal(text: str, line_no: int) -> Terminal:
    try:
        return Terminal(text)
    except ValueError:
        raise DataError(f"line {line_no}: bad terminal value {text!r}") from None


def _parse_label(text: str, line_no: int) -> ClinicalLabel:
    if text == "":
        return ClinicalLabel.NON_SEPSIS
    try:
        return ClinicalLabel(text)
    except ValueError:
        raise DataError(f"line {line_no}: bad clinical_label value {text!r}") from None


def _parse_float(text: str, what: str, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line_no}: bad {what} value {text!r}") from None
    if math.isnan(value):
        raise DataError(f"line {line_no}: NaN {what} rejected")
    return value


def _row_to_transition(
    pid: str,
    step: int,
    terminal: str,
    label: str,
    fluid: str,
    vis: str,
    feats: Sequence[str | float],
    line_no: int,
) -> Transition:
    fluid_ml = _parse_float(str(fluid), "fluid_ml", line_no)
    vis_val = _parse_float(str(vis), "vis", line_no)
    if fluid_ml < 0 or vis_val < 0:
        raise DataError(f"line {line_no}: negative dose")
    features = np.array([_parse_float(str(v), "feature", line_no) for v in feats], dtype=float)
    return Transition(
        patient_id=pid,
        step_index=step,
        features=features,
        fluid_ml=fluid_ml,
        vis=vis_val,
        clinical_label=_parse_label(str(label), line_no),
        terminal=_parse_terminal(str(terminal), line_no),
    )


def _assemble(rows: list[tuple[int, Transition]], feature_names: tuple[str, ...]) -> Dataset:
    by_patient: dict[str, list[tuple[int, Transition]]] = {}
    seen: set[tuple[str, int]] = set()
    for line_no, tr in rows:
        key = (tr.patient_id, tr.step_index)
        if key in seen:
            raise DataError(f"line {line_no}: duplicate (patient_id, step_index) {key}")
        seen.add(key)
        by_patient.setdefault(tr.patient_id, []).append((line_no, tr))

    episodes = []
    for pid in sorted(by_patient):
        entries = sorted(by_patient[pid], key=lambda e: e[1].step_index)
        transitions = tuple(tr for _, tr in entries)
        for ln, tr in entries[:-1]:
            if tr.terminal is not Terminal.NONE:
                raise DataError(f"line {ln}: patient {pid} has terminal row before its last step")
        last_ln, last = entries[-1]
        if last.terminal is Terminal.NONE:
            raise DataError(f"patient {pid}: no terminal row (last row at line {last_ln})")
        episodes.append(Episode(patient_id=pid, transitions=transitions))

    ds = make_dataset(episodes, feature_names)
    report = validate_dataset(ds)
    if not report.ok:
        raise DataError("; ".join(i.message for i in report.errors))
    return ds


def _as_text(stream: bytes | str | IO[bytes] | IO[str]) -> io.StringIO:
    if isinstance(stream, bytes):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return io.StringIO(data)


def parse_transition_log(stream: bytes | str | IO, fmt: str = "csv") -> Dataset:
    """Parse a CSV or JSONL transition log into a validated Dataset."""
    text = _as_text(stream)
    if fmt == "csv":
        return _parse_csv(text)
    if fmt == "jsonl":
        return _parse_jsonl(text)
    raise DataError(f"unknown format {fmt!r}")


def _parse_csv(text: io.StringIO) -> Dataset:
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty stream") from None
    if tuple(header[: len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
        raise DataError(f"bad header: expected columns {','.join(FIXED_COLUMNS)},f_0,...")
    feat_cols = header[len(FIXED_COLUMNS) :]
    expected = list(default_feature_names(len(feat_cols)))
    if feat_cols != expected:
        raise DataError(f"bad feature columns: expected {expected}, got {feat_cols}")
    d = len(feat_cols)

    rows: list[tuple[int, Transition]] = []
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {line_no}: expected {len(header)} fields, got {len(row)}")
        try:
            step = int(row[1])
        except ValueError:
            raise DataError(f"line {line_no}: bad step_index {row[1]!r}") from None
        tr = _row_to_transition(row[0], step, row[2], row[3], row[4], row[5], row[6:], line_no)
        if len(tr.features) != d:
            raise DataError(f"line {line_no}: feature dimension {len(tr.features)} != {d}")
        rows.append((line_no, tr))
    if not rows:
        raise DataError("no data rows")
    return _assemble(rows, tuple(default_feature_names(d)))


def _parse_jsonl(text: io.StringIO) -> Dataset:
    rows: list[tuple[int, Transition]] = []
    d = None
    for line_no, line in enumerate(text, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {line_no}: bad JSON ({exc.msg})") from None
        try:
            feats = obj["features"]
            tr = _row_to_transition(
                str(obj["patient_id"]),
                int(obj["step_index"]),
                str(obj["terminal"]),
                str(obj.get("clinical_label", "")),
                obj["fluid_ml"],
                obj["vis"],
                feats,
                line_no,
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"line {line_no}: missing or malformed field ({exc})") from None
        if d is None:
            d = len(tr.features)
        elif len(tr.features) != d:
            raise DataError(f"line {line_no}: feature dimension {len(tr.features)} != {d}")
        rows.append((line_no, tr))
    if not rows:
        raise DataError("no data rows")
    return _assemble(rows, tuple(default_feature_names(d or 0)))


# --- writing ---------------------------------------------------------------


def _fmt(value: float) -> str:
    # repr round-trips float64 exactly, keeping write -> parse bit-exact
    return repr(float(value))


def write_transition_log(dataset: Dataset, stream: IO[str], fmt: str = "csv") -> None:
    if fmt == "csv":
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(list(FIXED_COLUMNS) + list(dataset.feature_names))
        for ep in dataset.iter_episodes():
            for tr in ep.transitions:
                writer.writerow(
                    [
                        tr.patient_id,
                        tr.step_index,
                        tr.terminal.value,
                        tr.clinical_label.value,
                        _fmt(tr.fluid_ml),
                        _fmt(tr.vis),
                    ]
                    + [_fmt(v) for v in tr.features]
                )
    elif fmt == "jsonl":
        for ep in dataset.iter_episodes():
            for tr in ep.transitions:
                obj = {
                    "patient_id": tr.patient_id,
                    "step_index": tr.step_index,
                    "terminal": tr.terminal.value,
                    "clinical_label": tr.clinical_label.value,
                    "fluid_ml": tr.fluid_ml,
                    "vis": tr.vis,
                    "features": [float(v) for v in tr.features],
                }
                stream.write(json.dumps(obj, sort_keys=True) + "\n")
    else:
        raise DataError(f"unknown format {fmt!r}")


def load_dataset(path: str, fmt: str | None = None) -> Dataset:
    if fmt is None:
        fmt = "jsonl" if str(path).endswith(".jsonl") else "csv"
    with open(path, "rb") as fh:
        return parse_transition_log(fh, fmt)


def save_dataset(dataset: Dataset, path: str, fmt: str | None = None) -> None:
    if fmt is None:
        fmt = "jsonl" if str(path).endswith(".jsonl") else "csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_transition_log(dataset, fh, fmt)


# --- splitting -------------------------------------------------------------


def split_by_patient(dataset: Dataset, holdout_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Partition episodes at patient granularity; deterministic given seed."""
    if not 0.0 < holdout_fraction < 1.0:
        raise DataError(f"holdout_fraction must be in (0,1), got {holdout_fraction}")
    ids = dataset.patient_ids
    if len(ids) < 2:
        raise DataError("need at least 2 patients to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_hold = int(round(len(ids) * holdout_fraction))
    n_hold = min(max(n_hold, 1), len(ids) - 1)
    hold_ids = {ids[i] for i in order[:n_hold]}
    main = make_dataset(
        (dataset.episodes[p] for p in ids if p not in hold_ids), dataset.feature_names
    )
    hold = make_dataset((dataset.episodes[p] for p in ids if p in hold_ids), dataset.feature_names)
    return main, hold
