"""Trajectory CSV output.

Values are written with ``repr`` so that reading them back with ``float``
reproduces every bit.  Event markers are ``#`` comment lines placed before
the first row at or after the event time (rows at an event time already hold
the post-event state).
"""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path

import numpy as np

from .dae import Trajectory


def _fmt(v: float) -> str:
    return repr(float(v))


def format_trajectory_csv(traj: Trajectory) -> str:
    if len(traj) == 0:
        raise ValueError("trajectory is empty")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t",) + tuple(traj.names))
    markers = sorted(traj.events, key=lambda m: m[0])
    k = 0
    for t, row in zip(traj.times, traj.values):
        while k < len(markers) and markers[k][0] <= t:
            buf.write(f"# event t={_fmt(markers[k][0])} {markers[k][1]}\n")
            k += 1
        w.writerow([_fmt(t)] + [_fmt(v) for v in row])
    for tm, label in markers[k:]:
        buf.write(f"# event t={_fmt(tm)} {label}\n")
    return buf.getvalue()


def write_trajectory_csv(traj: Trajectory, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(format_trajectory_csv(traj))
    return path


def read_trajectory_csv(path: str | os.PathLike) -> Trajectory:
    """Inverse of :func:`write_trajectory_csv` (stats are not stored)."""
    names = None
    times, rows, events = [], [], []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("event t="):
                    stamp, _, label = body[len("event t="):].partition(" ")
                    events.append((float(stamp), label))
                continue
            if not line.strip():
                continue
            cells = next(csv.reader([line]))
            if names is None:
                if not cells or cells[0] != "t":
                    raise ValueError(f"{path}: first column must be 't'")
                names = tuple(cells[1:])
                continue
            times.append(float(cells[0]))
            rows.append([float(c) for c in cells[1:]])
    if names is None:
        raise ValueError(f"{path}: no header row")
    values = np.array(rows, dtype=float).reshape(len(times), len(names))
    return Trajectory(names, np.array(times), values, events)
