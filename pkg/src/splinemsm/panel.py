"""Longitudinal panels: observation records, CSV ingestion and export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import ValidationError


class Kind(IntEnum):
    INTERVAL_CENSORED = 0
    EXACT_LIVING = 1
    CENSORED_STATE = 2
    EXACT_DEATH = 3


@dataclass
class ObservationRecord:
    """One pair of consecutive observations of a subject.

    ``z_prev``/``z_cur`` are 1-based states; ``z_cur`` holds the censoring code
    for ``CENSORED_STATE`` records, with the admissible states in
    ``censored_set``. Covariates are the values on the interval's first row.
    """

    subject: str
    t_prev: float
    t_cur: float
    z_prev: int
    z_cur: int
    kind: Kind = Kind.INTERVAL_CENSORED
    censored_set: tuple = ()
    covariates: dict = field(default_factory=dict)


class Panel:
    """Column-oriented collection of observation records."""

    def __init__(self, records, n_states, *, covariate_names=None):
        records = list(records)
        self.n_states = int(n_states)
        self.subject = np.array([str(r.subject) for r in records], dtype=object)
        self.t_prev = np.array([r.t_prev for r in records], dtype=float)
        self.t_cur = np.array([r.t_cur for r in records], dtype=float)
        self.z_prev = np.array([r.z_prev for r in records], dtype=int)
        self.z_cur = np.array([r.z_cur for r in records], dtype=int)
        self.kind = np.array([int(r.kind) for r in records], dtype=int)
        C = self.n_states
        self.censored_mask = np.zeros((len(records), C), dtype=bool)
        for i, r in enumerate(records):
            if r.kind == Kind.CENSORED_STATE:
                self.censored_mask[i, [s - 1 for s in r.censored_set]] = True
        if covariate_names is None:
            covariate_names = sorted({k for r in records for k in r.covariates})
        self.covariates = {}
        for name in covariate_names:
            vals = [r.covariates.get(name, np.nan) for r in records]
            self.covariates[name] = np.array(vals, dtype=float)
        self._validate()

    def _validate(self):
        C = self.n_states
        if np.any(self.t_cur <= self.t_prev):
            i = int(np.argmax(self.t_cur <= self.t_prev))
            raise ValidationError(
                f"subject {self.subject[i]}: zero-length or reversed interval "
                f"({self.t_prev[i]}, {self.t_cur[i]}]")
        if np.any((self.z_prev < 1) | (self.z_prev > C)):
            i = int(np.argmax((self.z_prev < 1) | (self.z_prev > C)))
            raise ValidationError(f"subject {self.subject[i]}: unknown state {self.z_prev[i]}")
        known = self.kind != Kind.CENSORED_STATE
        bad = known & ((self.z_cur < 1) | (self.z_cur > C))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise ValidationError(f"subject {self.subject[i]}: unknown state {self.z_cur[i]}")

    def __len__(self):
        return self.t_prev.size

    @property
    def dt(self):
        return self.t_cur - self.t_prev

    @property
    def n_subjects(self):
        return len(set(self.subject))

    def records(self):
        names = list(self.covariates)
        out = []
        for i in range(len(self)):
            cset = tuple(int(s) + 1 for s in np.flatnonzero(self.censored_mask[i]))
            out.append(ObservationRecord(
                subject=self.subject[i], t_prev=float(self.t_prev[i]),
                t_cur=float(self.t_cur[i]), z_prev=int(self.z_prev[i]),
                z_cur=int(self.z_cur[i]), kind=Kind(int(self.kind[i])),
                censored_set=cset,
                covariates={n: float(self.covariates[n][i]) for n in names}))
        return out

    def subset(self, index):
        recs = self.records()
        return Panel([recs[i] for i in np.asarray(index)], self.n_states,
                     covariate_names=list(self.covariates))

    def pair_counts(self):
        """Counts of consecutively observed (from, to) state pairs."""
        C = self.n_states
        counts = np.zeros((C, C), dtype=int)
        known = self.kind != Kind.CENSORED_STATE
        np.add.at(counts, (self.z_prev[known] - 1, self.z_cur[known] - 1), 1)
        return counts

    def kind_counts(self):
        return {k.name: int(np.sum(self.kind == k)) for k in Kind}


def format_pair_counts(counts) -> str:
    C = counts.shape[0]
    width = max(7, len(str(counts.max())) + 1)
    lines = [" " * 9 + "".join(f"{'state ' + str(j + 1):>{width + 2}}" for j in range(C))]
    for i in range(C):
        lines.append(f"state {i + 1:<3}" + "".join(f"{counts[i, j]:>{width + 2}}" for j in range(C)))
    return "\n".join(lines)


# --- CSV panel files ---------------------------------------------------------

REQUIRED_COLUMNS = ("id", "time", "state")


def _read_rows(path):
    with open(path, newline="") as fh:
        text = "".join(line for line in fh if not line.lstrip().startswith("#"))
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ValidationError(f"{path}: empty file")
    missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise ValidationError(f"{path}: missing required column(s) {', '.join(missing)}")
    return list(reader), list(reader.fieldnames)


def ingest(path, *, death=False, cens_code=-99, n_states=None):
    """Read a panel CSV and classify every consecutive pair of rows.

    The absorbing death state (when ``death`` is true) is the highest state
    index. A censored observation is only admitted as the last row of a
    subject, and then stands for "some living state".
    """
    rows, fields = _read_rows(path)
    covnames = [f for f in fields if f not in REQUIRED_COLUMNS + ("exact",)]
    groups = {}
    for lineno, row in enumerate(rows, start=2):
        try:
            t = float(row["time"])
            s = int(float(row["state"]))
        except (TypeError, ValueError):
            raise ValidationError(f"row {lineno}: unparsable time or state") from None
        if not np.isfinite(t) or t < 0:
            raise ValidationError(f"row {lineno}: time must be a non-negative real")
        exact = row.get("exact", "0") or "0"
        if exact.strip().lower() not in ("0", "1", "true", "false"):
            raise ValidationError(f"row {lineno}: exact must be 0/1")
        cov = {}
        for name in covnames:
            try:
                cov[name] = float(row[name])
            except (TypeError, ValueError):
                cov[name] = np.nan
        groups.setdefault(row["id"], []).append(
            (lineno, t, s, exact.strip().lower() in ("1", "true"), cov))
    observed = {s for g in groups.values() for (_, _, s, _, _) in g if s != cens_code}
    if n_states is None:
        n_states = max(observed) if observed else 1
    C = int(n_states)
    living = tuple(range(1, C)) if death else tuple(range(1, C + 1))
    records = []
    for sid, obs in groups.items():
        if len(obs) < 2:
            raise ValidationError(f"id {sid}: at least two rows are required")
        if obs[0][2] == cens_code:
            raise ValidationError(f"id {sid} (row {obs[0][0]}): first state is censored")
        for (ln0, t0, s0, _, cov0), (ln1, t1, s1, ex1, _) in zip(obs[:-1], obs[1:]):
            if t1 <= t0:
                raise ValidationError(
                    f"id {sid} (row {ln1}): times must be strictly increasing")
            if s0 == cens_code:
                raise ValidationError(
                    f"id {sid} (row {ln0}): a censored state can only be the last observation")
            for ln, s in ((ln0, s0), (ln1, s1)):
                if s != cens_code and not 1 <= s <= C:
                    raise ValidationError(f"id {sid} (row {ln}): unknown state {s}")
            if death and s0 == C:
                raise ValidationError(f"id {sid} (row {ln1}): observation after death")
            if s1 == cens_code:
                kind, cset = Kind.CENSORED_STATE, living
            elif death and s1 == C:
                kind, cset = Kind.EXACT_DEATH, ()
            elif ex1:
                kind, cset = Kind.EXACT_LIVING, ()
            else:
                kind, cset = Kind.INTERVAL_CENSORED, ()
            records.append(ObservationRecord(sid, t0, t1, s0, s1, kind, cset, dict(cov0)))
    return Panel(records, C, covariate_names=covnames)


def panel_rows(panel: Panel):
    """Back-convert a panel into per-visit rows ``(id, time, state, exact, covariates)``."""
    rows = []
    last = None
    for r in panel.records():
        if last is None or last != r.subject:
            rows.append((r.subject, r.t_prev, r.z_prev, 0, r.covariates))
        exact = 1 if r.kind == Kind.EXACT_LIVING else 0
        rows.append((r.subject, r.t_cur, r.z_cur, exact, r.covariates))
        last = r.subject
    return rows


def write_panel_csv(panel: Panel, fh, *, header_comment=None):
    names = list(panel.covariates)
    has_exact = bool(np.any(panel.kind == Kind.EXACT_LIVING))
    if header_comment:
        fh.write(f"# {header_comment}\n")
    cols = ["id", "time", "state"] + (["exact"] if has_exact else []) + names
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for sid, t, s, ex, cov in panel_rows(panel):
        row = [sid, repr(float(t)), int(s)] + ([ex] if has_exact else [])
        row += [repr(float(cov[n])) for n in names]
        w.writerow(row)
