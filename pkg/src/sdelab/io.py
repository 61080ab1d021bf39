"""CSV/JSON rendering and atomic file output."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    """CSV cell: ints verbatim, floats to 9 significant digits, enums by value."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return format(v, ".9g")
    if value is None:
        return ""
    return str(getattr(value, "value", value))


def provenance_lines(provenance: dict) -> list[str]:
    return [f"# {k}={provenance[k]}" for k in sorted(provenance)]


def render_csv(header, rows, provenance: dict | None = None) -> str:
    lines = provenance_lines(provenance) if provenance else []
    lines.append(",".join(header))
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return getattr(obj, "value", obj)


def render_json(obj, *, indent: int | None = 2) -> str:
    """Deterministic JSON (sorted keys); non-finite floats become null."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=indent, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# exports


TRAJECTORY_COLUMNS = ("t", "x")
STATS_COLUMNS = ("i", "x0", "T", "U", "V", "mode", "m")
MCMC_COLUMNS = ("iter", "mu", "omega2")
RESULT_COLUMNS = ("experiment", "n_or_m", "replicate", "metric", "value", "error_flag")
CURVE_COLUMNS = ("structure", "n", "grid", "density")


def trajectory_csv(traj, provenance=None) -> str:
    return render_csv(TRAJECTORY_COLUMNS, zip(traj.times, traj.values), provenance)


def stats_csv(data, provenance=None) -> str:
    rows = (
        (i, x0, T, U, V, data.mode, "" if data.m is None else data.m)
        for i, (x0, T, U, V) in enumerate(zip(data.x0, data.T, data.U, data.V))
    )
    return render_csv(STATS_COLUMNS, rows, provenance)


def mcmc_csv(sample, provenance=None) -> str:
    start = sample.burn_in
    rows = ((start + i, mu, w) for i, (mu, w) in enumerate(sample.draws))
    return render_csv(MCMC_COLUMNS, rows, provenance)


def results_csv(result, provenance=None) -> str:
    rows = ((r.experiment, r.n_or_m, r.replicate, r.metric, r.value, r.error_flag) for r in result.rows)
    return render_csv(RESULT_COLUMNS, rows, provenance)


def curves_csv(result, provenance=None) -> str:
    return render_csv(CURVE_COLUMNS, result.curves, provenance)


# ---------------------------------------------------------------------------
# atomic output


def write_atomic(outputs: dict) -> None:
    """Write {path: text} so each file appears complete or not at all.

    All contents are staged to temporary files in the target directories
    before any rename, so a failure while staging leaves no output behind.
    """
    staged = []
    try:
        for path, text in outputs.items():
            path = Path(path)
            fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.chmod(tmp, 0o644)
        for tmp, path in staged:
            os.replace(tmp, path)
    except BaseException:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise
