from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class PanelError(ValueError):
    """Invalid panel data (bad cell, broken invariant, missing column)."""


def _readonly(values: np.ndarray) -> np.ndarray:
    values = np.array(values, copy=True)
    values.setflags(write=False)
    return values


class TripRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    trip_index: int = Field(..., ge=1)
    time: float = Field(..., ge=0.0, le=1.0)
    offset: float = Field(..., gt=0.0)
    trip_covariates: tuple[float, ...] = ()
    count: int = Field(..., ge=0)
    block: Optional[int] = None


class Subject(BaseModel):
    """
    One subject's trip sequence, stored column-wise.
    Arrays are copied on construction and made read-only.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    subject_id: str
    subject_covariates: np.ndarray
    trip_index: np.ndarray
    times: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    trip_covariates: np.ndarray
    block_ids: Optional[np.ndarray] = None

    @field_validator("subject_covariates", "times", "offsets", mode="before")
    @classmethod
    def _as_float_vector(cls, v):
        return np.asarray(v, dtype=np.float64).reshape(-1)

    @field_validator("trip_index", "counts", mode="before")
    @classmethod
    def _as_int_vector(cls, v):
        arr = np.asarray(v)
        if arr.dtype.kind == "f":
            if not np.all(np.isfinite(arr)) or not np.all(arr == np.round(arr)):
                raise PanelError("counts and trip indices must be integers")
        return arr.astype(np.int64).reshape(-1)

    @field_validator("block_ids", mode="before")
    @classmethod
    def _as_block_vector(cls, v):
        if v is None:
            return None
        return np.asarray(v).astype(np.int64).reshape(-1)

    @field_validator("trip_covariates", mode="before")
    @classmethod
    def _as_matrix(cls, v):
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
        return arr

    @model_validator(mode="after")
    def _check_invariants(self):
        k = self.times.shape[0]
        if k < 1:
            raise PanelError(f"Subject {self.subject_id} has no trips")
        if self.trip_covariates.size == 0:
            object.__setattr__(self, "trip_covariates", np.zeros((k, 0)))
        for name in ("trip_index", "offsets", "counts"):
            if getattr(self, name).shape[0] != k:
                raise PanelError(f"Subject {self.subject_id}: {name} length differs from times")
        if self.trip_covariates.shape[0] != k:
            raise PanelError(f"Subject {self.subject_id}: trip covariates have wrong row count")
        if self.block_ids is not None and self.block_ids.shape[0] != k:
            raise PanelError(f"Subject {self.subject_id}: block ids have wrong length")
        if not np.all(np.isfinite(self.times)) or np.any(self.times < 0) or np.any(self.times > 1):
            raise PanelError(f"Subject {self.subject_id}: trip times must lie in [0, 1]")
        if not np.all(np.isfinite(self.offsets)) or np.any(self.offsets <= 0):
            raise PanelError(f"Subject {self.subject_id}: offsets must be positive")
        if np.any(self.counts < 0):
            raise PanelError(f"Subject {self.subject_id}: counts must be nonnegative")
        if np.any(self.trip_index < 1):
            raise PanelError(f"Subject {self.subject_id}: trip indices are 1-based")
        if not np.all(np.isfinite(self.trip_covariates)) or not np.all(np.isfinite(self.subject_covariates)):
            raise PanelError(f"Subject {self.subject_id}: covariates must be finite")

        # sorted by time, ties broken by strictly increasing trip_index
        dt = np.diff(self.times)
        di = np.diff(self.trip_index)
        if np.any(dt < 0) or np.any((dt == 0) & (di <= 0)):
            raise PanelError(f"Subject {self.subject_id}: trips not sorted by (time, trip_index)")

        for name in ("subject_covariates", "trip_index", "times", "offsets", "counts", "trip_covariates"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        if self.block_ids is not None:
            object.__setattr__(self, "block_ids", _readonly(self.block_ids))
        return self

    @property
    def k(self) -> int:
        return int(self.times.shape[0])

    @property
    def trips(self) -> list[TripRecord]:
        return [
            TripRecord(
                subject_id=self.subject_id,
                trip_index=int(self.trip_index[j]),
                time=float(self.times[j]),
                offset=float(self.offsets[j]),
                trip_covariates=tuple(float(x) for x in self.trip_covariates[j]),
                count=int(self.counts[j]),
                block=None if self.block_ids is None else int(self.block_ids[j]),
            )
            for j in range(self.k)
        ]

    def take(self, positions: np.ndarray, block_ids: Optional[np.ndarray] = None) -> "Subject":
        """Sub-sequence at the given (sorted) 0-based positions."""
        positions = np.sort(np.asarray(positions, dtype=np.int64))
        return Subject(
            subject_id=self.subject_id,
            subject_covariates=self.subject_covariates,
            trip_index=self.trip_index[positions],
            times=self.times[positions],
            offsets=self.offsets[positions],
            counts=self.counts[positions],
            trip_covariates=self.trip_covariates[positions],
            block_ids=block_ids,
        )

    def equals(self, other: "Subject") -> bool:
        if self.subject_id != other.subject_id:
            return False
        pairs = [
            (self.subject_covariates, other.subject_covariates),
            (self.trip_index, other.trip_index),
            (self.times, other.times),
            (self.offsets, other.offsets),
            (self.counts, other.counts),
            (self.trip_covariates, other.trip_covariates),
        ]
        if (self.block_ids is None) != (other.block_ids is None):
            return False
        if self.block_ids is not None:
            pairs.append((self.block_ids, other.block_ids))
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in pairs)


class Panel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    subjects: tuple[Subject, ...]
    z_names: tuple[str, ...] = ()
    x_names: tuple[str, ...] = ()

    @field_validator("subjects", mode="before")
    @classmethod
    def _as_tuple(cls, v):
        return tuple(v)

    @model_validator(mode="after")
    def _check_invariants(self):
        if not self.subjects:
            raise PanelError("Panel has no subjects")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise PanelError("Subject ids must be unique")
        p_z, p_x = len(self.z_names), len(self.x_names)
        for s in self.subjects:
            if s.subject_covariates.shape[0] != p_z or s.trip_covariates.shape[1] != p_x:
                raise PanelError(
                    f"Subject {s.subject_id}: covariate dimensions differ from panel ({p_z}, {p_x})"
                )
        return self

    @property
    def p_z(self) -> int:
        return len(self.z_names)

    @property
    def p_x(self) -> int:
        return len(self.x_names)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def n_obs(self) -> int:
        return int(sum(s.k for s in self.subjects))

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def has_blocks(self) -> bool:
        return any(s.block_ids is not None for s in self.subjects)

    @property
    def z_matrix(self) -> np.ndarray:
        return np.vstack([s.subject_covariates for s in self.subjects]).reshape(self.n, self.p_z)

    def select(self, subject_ids: list[str]) -> "Panel":
        by_id = {s.subject_id: s for s in self.subjects}
        return self.model_copy(update={"subjects": tuple(by_id[i] for i in subject_ids)})

    def with_subjects(self, subjects: list[Subject]) -> "Panel":
        return Panel(subjects=subjects, z_names=self.z_names, x_names=self.x_names)

    def with_offsets_scaled(self, kappa: float) -> "Panel":
        return self.with_subjects([
            Subject(
                subject_id=s.subject_id,
                subject_covariates=s.subject_covariates,
                trip_index=s.trip_index,
                times=s.times,
                offsets=s.offsets * kappa,
                counts=s.counts,
                trip_covariates=s.trip_covariates,
                block_ids=s.block_ids,
            )
            for s in self.subjects
        ])

    def equals(self, other: "Panel") -> bool:
        return (
            self.z_names == other.z_names
            and self.x_names == other.x_names
            and self.n == other.n
            and all(a.equals(b) for a, b in zip(self.subjects, other.subjects))
        )
