"""CSV ingestion, fit reports and curve exports."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParseError, UnbalancedPanelError


@dataclass(frozen=True, eq=False)
class CurveData:
    x: np.ndarray
    y: np.ndarray
    trials: np.ndarray = None

    def __len__(self):
        return self.x.size


@dataclass(frozen=True, eq=False)
class PanelData:
    """Balanced panel: ``Y[i, j]`` is subject ``j`` at time ``t[i]``.

    Subjects are ordered controls first when group labels are present.
    """

    t: np.ndarray
    Y: np.ndarray
    subjects: tuple
    labels: np.ndarray = None

    def __len__(self):
        return self.Y.size


def _float(cell, col, line):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"column {col!r}: {cell!r} is not a number", line=line) from None
    if not math.isfinite(v):
        raise ParseError(f"column {col!r}: non-finite value {cell!r}", line=line)
    return v


def _read_rows(path, needed):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, a header row is required", line=1) from None
        except UnicodeDecodeError:
            raise ParseError("file is not valid UTF-8", line=1) from None
        header = [h.strip() for h in header]
        missing = [c for c in needed if c not in header]
        if missing:
            raise ParseError(f"missing column(s) {', '.join(missing)}; header has {', '.join(header)}",
                             line=1)
        idx = {c: header.index(c) for c in needed}
        rows = []
        try:
            for line, rec in enumerate(reader, start=2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != len(header):
                    raise ParseError(f"expected {len(header)} fields, found {len(rec)}", line=line)
                rows.append((line, {c: rec[i].strip() for c, i in idx.items()}))
        except UnicodeDecodeError:
            raise ParseError("file is not valid UTF-8") from None
    if not rows:
        raise ParseError("no data rows")
    return rows


def ingest_csv(path, x="x", y="y", subject=None, group=None, trials=None):
    """Read a curve (``x, y``) or panel (``t, y, subject``) data set.

    Pass ``subject`` (and optionally ``group``) column names for hierarchical
    data; ``x`` then names the time column.  Group labels must be 0 or 1 and
    constant within a subject.

    Raises
    ------
    ParseError
        Missing columns, non-numeric cells; messages carry line numbers.
    UnbalancedPanelError
        Subjects observed on different time grids.
    """
    needed = [x, y] + [c for c in (subject, group, trials) if c]
    rows = _read_rows(path, needed)
    if subject is None:
        xs = np.array([_float(r[x], x, ln) for ln, r in rows])
        ys = np.array([_float(r[y], y, ln) for ln, r in rows])
        tr = None
        if trials:
            tr = np.array([_float(r[trials], trials, ln) for ln, r in rows])
            if np.any(tr <= 0):
                raise ParseError(f"column {trials!r} must be positive")
        return CurveData(x=xs, y=ys, trials=tr)

    by_subject, first_line, sub_group = {}, {}, {}
    for ln, r in rows:
        sid = r[subject]
        if sid == "":
            raise ParseError(f"column {subject!r} is empty", line=ln)
        t_val = _float(r[x], x, ln)
        y_val = _float(r[y], y, ln)
        if group:
            g = _float(r[group], group, ln)
            if g not in (0.0, 1.0):
                raise ParseError(f"column {group!r} must be 0 or 1, got {r[group]!r}", line=ln)
            if sub_group.setdefault(sid, int(g)) != int(g):
                raise ParseError(f"subject {sid!r} has more than one group label", line=ln)
        obs = by_subject.setdefault(sid, {})
        first_line.setdefault(sid, ln)
        if t_val in obs:
            raise ParseError(f"subject {sid!r} has a repeated time {t_val}", line=ln)
        obs[t_val] = y_val
    order = list(by_subject)
    grid = sorted(by_subject[order[0]])
    for sid in order[1:]:
        if sorted(by_subject[sid]) != grid:
            raise UnbalancedPanelError(
                f"subject {sid!r} is not observed on the same time grid as subject {order[0]!r} "
                f"({len(by_subject[sid])} vs {len(grid)} points); balanced panels are required",
                line=first_line[sid])
    labels = None
    if group:
        order.sort(key=lambda s: sub_group[s])
        labels = np.array([sub_group[s] for s in order], dtype=int)
    Y = np.array([[by_subject[s][tv] for s in order] for tv in grid])
    return PanelData(t=np.array(grid), Y=Y, subjects=tuple(order), labels=labels)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class FitReport:
    """Machine-readable summary of one fit (``report.json``)."""

    model: dict
    variances: list
    phi: float
    total_ed: float
    deviance_trace: list
    iterations: dict
    converged: bool
    floored: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def build_report(spec, result, model, ed_bounds=None, timing=None):
    """Collect a :class:`FitReport` from a fit.

    ``ed_bounds`` is the ``(per_param, per_block)`` pair from
    :func:`sop.model.ed_upper_bounds`.
    """
    rows = []
    for (k, l), s2 in result.state.items():
        rows.append({
            "name": spec.label((k, l)),
            "block": spec.blocks[k].name,
            "sigma2": s2,
            "ed": result.ed[(k, l)],
            "ed_upper_bound": None if ed_bounds is None else int(ed_bounds[0][(k, l)]),
        })
    return FitReport(
        model=model,
        variances=rows,
        phi=result.state.phi,
        total_ed=result.total_ed,
        deviance_trace=[float(v) for v in result.deviance_trace],
        iterations={"outer": result.iterations[0], "inner": result.iterations[1]},
        converged=bool(result.converged),
        floored=sorted(spec.label(k) for k in result.state.floored),
        timing=dict(timing or {}),
    )


def write_columns(target, columns):
    """Write equally long columns as CSV with a header, full float precision.

    ``target`` is a path or an open text stream.
    """
    names = list(columns)
    data = [np.asarray(columns[c]) for c in names]
    if len({len(c) for c in data}) > 1:
        raise ValueError("columns must have equal length")
    if hasattr(target, "write"):
        _write_rows(target, names, data)
        return
    with open(target, "w", newline="", encoding="utf-8") as fh:
        _write_rows(fh, names, data)


def _write_rows(fh, names, data):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(names)
    for row in zip(*data):
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
