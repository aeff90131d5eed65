import logging
import os
import sys
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from data.data_models import Panel, PanelError, Subject
from utils import validate_columns

logger = logging.getLogger(__name__)


class PanelSchema(BaseModel):
    """Column-name mapping for panel CSV files."""
    subject: str = "subject"
    time: str = "time"
    offset: str = "offset"
    count: str = "count"
    trip_index: str = "trip_index"
    block: str = "block"
    z_cols: list[str] = Field(default_factory=list)
    x_cols: list[str] = Field(default_factory=list)


def _numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise PanelError(f"Non-numeric or empty value in column '{column}' at row {row}")
    return values.to_numpy(dtype=np.float64)


def _optional_integers(frame: pd.DataFrame, column: str) -> np.ndarray:
    """Integer-valued column where empty cells read as NaN."""
    raw = frame[column]
    values = pd.to_numeric(raw, errors="coerce")
    bad = values.isna() & raw.notna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
        raise PanelError(f"Non-numeric value in column '{column}' at row {row}")
    values = values.to_numpy(dtype=np.float64)
    _reject_rows(np.isfinite(values) & (values != np.floor(values)), f"Column '{column}' must hold integers", values)
    return values


def _reject_rows(mask: np.ndarray, message: str, values: np.ndarray) -> None:
    if mask.any():
        row = int(np.flatnonzero(mask)[0])
        raise PanelError(f"{message} at row {row + 1} (got {values[row]!r})")


def load_panel(path: str, schema: Optional[PanelSchema] = None) -> Panel:
    """
    Read a one-row-per-trip CSV into a Panel.

    Subjects keep their order of first appearance; trips are sorted by
    (time, trip_index) within subject. Rows are numbered from 1, header
    excluded, in error messages.
    """
    schema = schema or PanelSchema()
    if not os.path.exists(path):
        raise FileNotFoundError(f"Panel file not found: {path}")

    frame = pd.read_csv(path, dtype={schema.subject: str}, float_precision="round_trip")
    required = [schema.subject, schema.time, schema.offset, schema.count] + schema.z_cols + schema.x_cols
    is_valid, error = validate_columns(list(frame.columns), required)
    if not is_valid:
        raise PanelError(error)

    if frame[schema.subject].isna().any():
        row = int(np.flatnonzero(frame[schema.subject].isna().to_numpy())[0]) + 1
        raise PanelError(f"Missing subject id at row {row}")

    times = _numeric(frame, schema.time)
    offsets = _numeric(frame, schema.offset)
    counts = _numeric(frame, schema.count)
    z = np.column_stack([_numeric(frame, c) for c in schema.z_cols]) if schema.z_cols else np.zeros((len(frame), 0))
    x = np.column_stack([_numeric(frame, c) for c in schema.x_cols]) if schema.x_cols else np.zeros((len(frame), 0))

    _reject_rows(offsets <= 0, "Offset must be positive", offsets)
    _reject_rows((times < 0) | (times > 1), "Time must lie in [0, 1]", times)
    _reject_rows((counts < 0) | (counts != np.floor(counts)), "Count must be a nonnegative integer", counts)

    has_index = schema.trip_index in frame.columns
    trip_index = None
    if has_index:
        raw_index = _numeric(frame, schema.trip_index)
        _reject_rows(raw_index != np.floor(raw_index), "Trip index must be an integer", raw_index)
        trip_index = raw_index.astype(np.int64)
    blocks = _optional_integers(frame, schema.block) if schema.block in frame.columns else None

    ids = frame[schema.subject].to_numpy()
    order_of_ids = list(dict.fromkeys(ids))
    subjects = []
    for sid in order_of_ids:
        rows = np.flatnonzero(ids == sid)
        if has_index:
            order = rows[np.lexsort((trip_index[rows], times[rows]))]
            key = list(zip(times[order], trip_index[order]))
            if len(set(key)) != len(key):
                dup = next(i for i in range(1, len(key)) if key[i] == key[i - 1])
                raise PanelError(
                    f"Duplicate (subject, time, trip_index) for subject {sid} at row {int(order[dup]) + 1}"
                )
            index = trip_index[order]
        else:
            order = rows[np.argsort(times[rows], kind="stable")]
            index = np.arange(1, len(order) + 1)

        block_ids = None
        if blocks is not None:
            present = np.isfinite(blocks[order])
            if present.any() and not present.all():
                row = int(order[np.flatnonzero(~present)[0]]) + 1
                raise PanelError(f"Block id missing for some but not all trips of subject {sid} at row {row}")
            if present.all():
                block_ids = blocks[order].astype(np.int64)

        zs = z[rows]
        if zs.shape[1] and np.any(zs != zs[0]):
            raise PanelError(f"Subject covariates vary within subject {sid}")

        try:
            subjects.append(Subject(
                subject_id=str(sid),
                subject_covariates=zs[0],
                trip_index=index,
                times=times[order],
                offsets=offsets[order],
                counts=counts[order],
                trip_covariates=x[order],
                block_ids=block_ids,
            ))
        except ValueError as exc:
            raise PanelError(f"Invalid data for subject {sid}: {exc}") from exc

    panel = Panel(subjects=subjects, z_names=tuple(schema.z_cols), x_names=tuple(schema.x_cols))
    logger.info(f"loaded panel n={panel.n} N={panel.n_obs} from {path}")
    return panel


def panel_frame(panel: Panel) -> pd.DataFrame:
    """One row per trip, subject covariates repeated on every row."""
    frames = []
    for s in panel.subjects:
        columns = {
            "subject": np.repeat(s.subject_id, s.k),
            "trip_index": s.trip_index,
            "time": s.times,
            "offset": s.offsets,
            "count": s.counts,
        }
        for j, name in enumerate(panel.z_names):
            columns[name] = np.repeat(s.subject_covariates[j], s.k)
        for j, name in enumerate(panel.x_names):
            columns[name] = s.trip_covariates[:, j]
        if panel.has_blocks:
            # left empty for subjects without blocks
            columns["block"] = pd.array(s.block_ids if s.block_ids is not None else [pd.NA] * s.k, dtype="Int64")
        frames.append(pd.DataFrame(columns))
    return pd.concat(frames, ignore_index=True)


def write_panel(panel: Panel, path) -> None:
    """
    Write a Panel as CSV with 17 significant digits, so that loading the
    file back reproduces every value exactly. `path` may be a file path,
    "-" for standard output, or an open text stream.
    """
    frame = panel_frame(panel)
    if path == "-":
        frame.to_csv(sys.stdout, index=False, float_format="%.17g")
        return
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"wrote panel n={panel.n} N={panel.n_obs} to {path}")


def schema_for(panel: Panel) -> PanelSchema:
    """Schema matching the columns written by write_panel."""
    return PanelSchema(z_cols=list(panel.z_names), x_cols=list(panel.x_names))
