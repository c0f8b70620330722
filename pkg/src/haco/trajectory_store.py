"""Offline trajectory storage: loading, sanitizing, demographics and splits.

A :class:`Dataset` keeps its steps column-wise in read-only numpy arrays so
that downstream stages can vectorize freely; :attr:`Dataset.steps` and
:meth:`Dataset.step` materialize :class:`Step` records on demand.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyDataset, InsufficientEpisodes, InvalidConfig, MissingRequiredColumn

log = logging.getLogger(__name__)

AGE_LEVELS = ("Under35", "35to49", "50to64", "Over65", "Unknown")
SEX_LEVELS = ("Female", "Male", "Unknown")
RACE_LEVELS = ("Black", "White", "Asian", "Hispanic", "Other", "Unknown")
UNKNOWN = "Unknown"

# Common spellings seen across exports, keyed by sanitized name.
COLUMN_ALIASES = {
    "patient": "patient_id",
    "patientid": "patient_id",
    "member_id": "patient_id",
    "episode": "episode_id",
    "episodeid": "episode_id",
    "timestep": "t",
    "time_step": "t",
    "step": "t",
    "state": "state_json",
    "adverse_event": "harm",
}

_NON_ALNUM = re.compile(r"[^0-9a-z]+")


def sanitize_column_name(raw: str) -> str:
    """Lowercase, collapse non-alphanumeric runs to ``_`` and trim underscores.

    >>> sanitize_column_name("  Reward(t-1) ")
    'reward_t_1'
    """
    name = _NON_ALNUM.sub("_", str(raw).lower()).strip("_")
    return name or "col"


@dataclass(frozen=True)
class Demographics:
    age_bin: str = UNKNOWN
    sex: str = UNKNOWN
    race: str = UNKNOWN

    def __post_init__(self) -> None:
        if self.age_bin not in AGE_LEVELS:
            raise ValueError(f"unknown age bin {self.age_bin!r}")
        if self.sex not in SEX_LEVELS:
            raise ValueError(f"unknown sex {self.sex!r}")
        if self.race not in RACE_LEVELS:
            raise ValueError(f"unknown race {self.race!r}")

    @property
    def unknown_count(self) -> int:
        return sum(v == UNKNOWN for v in (self.age_bin, self.sex, self.race))


@dataclass(frozen=True)
class Step:
    patient_id: str
    episode_id: str
    t: int
    state: tuple[float, ...]
    action: int
    reward: float
    harm: bool
    prev_reward: float


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    calib_frac: float = 0.15
    test_frac: float = 0.15

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.calib_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise InvalidConfig(f"split fractions must lie in (0, 1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidConfig(f"split fractions must sum to 1: {fracs}")


@dataclass(frozen=True)
class LoadSummary:
    rows_read: int
    rows_dropped: int
    episodes: int
    patients: int
    feature_count: int
    state_values_dropped: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "rows_read": self.rows_read,
            "rows_dropped": self.rows_dropped,
            "episodes": self.episodes,
            "patients": self.patients,
            "feature_count": self.feature_count,
            "state_values_dropped": self.state_values_dropped,
        }


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered steps grouped into contiguous episodes.

    Build instances with :meth:`from_columns`, which validates the episode
    structure and derives ``prev_reward``.
    """

    patient_id: np.ndarray
    episode_id: np.ndarray
    t: np.ndarray
    states: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    harm: np.ndarray
    prev_reward: np.ndarray
    feature_names: tuple[str, ...]
    action_count: int
    demographics: Mapping[str, Demographics] = field(default_factory=dict)
    summary: LoadSummary | None = None

    @classmethod
    def from_columns(
        cls,
        *,
        patient_id: Sequence[str],
        episode_id: Sequence[str],
        t: Sequence[int],
        states: np.ndarray,
        action: Sequence[int],
        reward: Sequence[float],
        harm: Sequence[bool] | None = None,
        feature_names: Sequence[str],
        action_count: int,
        demographics: Mapping[str, Demographics] | None = None,
        summary: LoadSummary | None = None,
    ) -> "Dataset":
        n = len(action)
        if n == 0:
            raise EmptyDataset("dataset has no steps")
        if action_count < 1:
            raise InvalidConfig("action_count must be >= 1")
        pid = np.asarray(patient_id, dtype=object)
        eid = np.asarray(episode_id, dtype=object)
        tt = np.asarray(t, dtype=np.int64)
        act = np.asarray(action, dtype=np.int64)
        rew = np.asarray(reward, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64).reshape(n, len(feature_names))
        hrm = rew < 0 if harm is None else np.asarray(harm, dtype=bool)
        if not (len(pid) == len(eid) == len(tt) == len(rew) == len(hrm) == n):
            raise ValueError("column lengths differ")
        if act.min() < 0 or act.max() >= action_count:
            raise ValueError("action outside [0, action_count)")
        if tt.min() < 0:
            raise ValueError("negative timestep")

        starts = _episode_starts(eid)
        if len(set(eid[starts])) != len(starts):
            raise ValueError("episode steps must be contiguous")
        first = np.zeros(n, dtype=bool)
        first[starts] = True
        if np.any(np.diff(tt)[~first[1:]] <= 0):
            raise ValueError("t must strictly increase within an episode")
        prev = np.empty(n)
        prev[0] = 0.0
        prev[1:] = rew[:-1]
        prev[first] = 0.0

        return cls(
            patient_id=_readonly(pid),
            episode_id=_readonly(eid),
            t=_readonly(tt),
            states=_readonly(np.ascontiguousarray(states)),
            action=_readonly(act),
            reward=_readonly(rew),
            harm=_readonly(hrm),
            prev_reward=_readonly(prev),
            feature_names=tuple(feature_names),
            action_count=int(action_count),
            demographics=dict(demographics or {}),
            summary=summary,
        )

    def __len__(self) -> int:
        return len(self.action)

    @cached_property
    def episode_bounds(self) -> np.ndarray:
        """``(E, 2)`` array of ``[start, stop)`` step ranges in load order."""
        starts = _episode_starts(self.episode_id)
        stops = np.append(starts[1:], len(self))
        return _readonly(np.column_stack([starts, stops]))

    @property
    def episodes(self) -> dict[str, tuple[int, int]]:
        return {self.episode_id[s]: (int(s), int(e)) for s, e in self.episode_bounds}

    @property
    def n_episodes(self) -> int:
        return len(self.episode_bounds)

    @cached_property
    def episode_index(self) -> np.ndarray:
        """Ordinal of the episode each step belongs to."""
        lengths = np.diff(self.episode_bounds, axis=1).ravel()
        return _readonly(np.repeat(np.arange(len(lengths)), lengths))

    @cached_property
    def is_terminal(self) -> np.ndarray:
        term = np.zeros(len(self), dtype=bool)
        term[self.episode_bounds[:, 1] - 1] = True
        return _readonly(term)

    @property
    def episode_lengths(self) -> np.ndarray:
        return np.diff(self.episode_bounds, axis=1).ravel()

    @property
    def episode_patients(self) -> np.ndarray:
        return self.patient_id[self.episode_bounds[:, 0]]

    def step(self, i: int) -> Step:
        return Step(
            patient_id=str(self.patient_id[i]),
            episode_id=str(self.episode_id[i]),
            t=int(self.t[i]),
            state=tuple(float(v) for v in self.states[i]),
            action=int(self.action[i]),
            reward=float(self.reward[i]),
            harm=bool(self.harm[i]),
            prev_reward=float(self.prev_reward[i]),
        )

    @property
    def steps(self) -> list[Step]:
        return [self.step(i) for i in range(len(self))]

    def step_indices(self, ordinals: Iterable[int]) -> np.ndarray:
        """Step positions covered by the given episode ordinals, in that order."""
        ordinals = np.asarray(list(ordinals), dtype=np.int64)
        if len(ordinals) == 0:
            raise EmptyDataset("no episodes selected")
        return np.concatenate([np.arange(s, e) for s, e in self.episode_bounds[ordinals]])

    def select_episodes(self, ordinals: Iterable[int]) -> "Dataset":
        """New dataset holding the given episodes, in the order given."""
        idx = self.step_indices(ordinals)
        patients = set(self.patient_id[idx])
        return Dataset.from_columns(
            patient_id=self.patient_id[idx],
            episode_id=self.episode_id[idx],
            t=self.t[idx],
            states=self.states[idx],
            action=self.action[idx],
            reward=self.reward[idx],
            harm=self.harm[idx],
            feature_names=self.feature_names,
            action_count=self.action_count,
            demographics={p: d for p, d in self.demographics.items() if p in patients},
        )

    def with_demographics(self, demographics: Mapping[str, Demographics]) -> "Dataset":
        return Dataset(
            **{f: getattr(self, f) for f in self.__dataclass_fields__ if f != "demographics"},
            demographics=dict(demographics),
        )

    def demographics_for(self, patient_id: str) -> Demographics:
        return self.demographics.get(patient_id, Demographics())


def _episode_starts(episode_id: np.ndarray) -> np.ndarray:
    if len(episode_id) == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.empty(len(episode_id), dtype=bool)
    change[0] = True
    change[1:] = episode_id[1:] != episode_id[:-1]
    return np.flatnonzero(change)


# --------------------------------------------------------------------------
# loading

def _parse_float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return float("nan")


def _numeric(col: pd.Series) -> pd.Series:
    """Column as float64, unparseable entries NaN; uses ``float`` for exact round-trips."""
    return col.map(_parse_float).astype(np.float64)


_TRUE = {"1", "true", "t", "yes", "y", "1.0"}
_FALSE = {"0", "false", "f", "no", "n", "0.0"}


def _read_raw(path: Path, fmt: str) -> pd.DataFrame:
    if fmt == "csv":
        return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if fmt == "jsonl":
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(json.loads(line))
        frame = pd.DataFrame.from_records(records)
        # state_json may arrive as an object rather than an encoded string
        for col in frame.columns:
            frame[col] = [
                json.dumps(v) if isinstance(v, (dict, list)) else ("" if v is None else str(v))
                for v in frame[col]
            ]
        return frame
    raise InvalidConfig(f"unsupported trajectory format {fmt!r}")


def _sanitize_frame(frame: pd.DataFrame) -> pd.DataFrame:
    names = []
    for col in frame.columns:
        name = sanitize_column_name(col)
        names.append(COLUMN_ALIASES.get(name, name))
    frame = frame.copy()
    frame.columns = names
    # schema drift can produce duplicate columns; the first one wins
    return frame.loc[:, ~frame.columns.duplicated()]


def _parse_state_json(values: Sequence[str]) -> tuple[list[dict[str, float]], int]:
    rows: list[dict[str, float]] = []
    dropped = 0
    for raw in values:
        row: dict[str, float] = {}
        try:
            obj = json.loads(raw) if raw else {}
        except (json.JSONDecodeError, TypeError):
            obj = None
        if not isinstance(obj, dict):
            dropped += 1
            rows.append(row)
            continue
        for key, val in obj.items():
            if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
                dropped += 1
                continue
            row[str(key)] = float(val)
        rows.append(row)
    return rows, dropped


def _infer_episode_ids(pids: np.ndarray, t: np.ndarray | None) -> np.ndarray:
    out = np.empty(len(pids), dtype=object)
    if t is None:
        for i, p in enumerate(pids):
            out[i] = f"{p}:0"
        return out
    counters: dict[str, int] = {}
    prev_p, prev_t = None, None
    for i, (p, ti) in enumerate(zip(pids, t)):
        if p != prev_p or ti <= prev_t:
            counters[p] = counters.get(p, -1) + 1
        out[i] = f"{p}:{counters[p]}"
        prev_p, prev_t = p, ti
    return out


def load_trajectories(
    path: str | Path, format: str | None = None, action_count: int = 9
) -> Dataset:
    """Load a CSV or JSONL trajectory export into a :class:`Dataset`.

    Column names are sanitized before lookup. Rows with an unparseable
    patient id, action, reward or timestep are dropped and counted in
    ``dataset.summary``. Missing episode ids are inferred: a new episode
    starts when the patient changes or ``t`` does not increase.
    """
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix.lower() in (".jsonl", ".ndjson") else "csv")
    frame = _sanitize_frame(_read_raw(path, fmt))
    for required in ("patient_id", "action", "reward"):
        if required not in frame.columns:
            raise MissingRequiredColumn(required)
    rows_read = len(frame)

    pid = frame["patient_id"].astype(str).str.strip()
    action = _numeric(frame["action"])
    reward = _numeric(frame["reward"])
    valid = (pid != "") & np.isfinite(action) & np.isfinite(reward)
    valid &= (action == np.floor(action)) & (action >= 0) & (action < action_count)
    has_t = "t" in frame.columns
    if has_t:
        t_num = _numeric(frame["t"])
        valid &= np.isfinite(t_num) & (t_num == np.floor(t_num)) & (t_num >= 0)

    frame = frame.loc[valid.to_numpy()].reset_index(drop=True)
    pid = pid[valid].to_numpy(dtype=object)
    action = action[valid].to_numpy().astype(np.int64)
    reward = reward[valid].to_numpy(dtype=np.float64)
    t = t_num[valid].to_numpy().astype(np.int64) if has_t else None
    if len(frame) == 0:
        raise EmptyDataset(f"no valid rows in {path}")

    if "harm" in frame.columns:
        text = frame["harm"].astype(str).str.strip().str.lower()
        harm = np.where(text.isin(_TRUE), True, np.where(text.isin(_FALSE), False, reward < 0))
    else:
        harm = reward < 0

    state_dropped = 0
    if "state_json" in frame.columns:
        parsed, state_dropped = _parse_state_json(frame["state_json"].tolist())
        names = sorted({k for row in parsed for k in row})
        col = {name: j for j, name in enumerate(names)}
        states = np.zeros((len(frame), len(names)))
        for i, row in enumerate(parsed):
            for k, v in row.items():
                states[i, col[k]] = v
    else:
        cols = sorted(c for c in frame.columns if c.startswith("state_"))
        names = [c[len("state_"):] for c in cols]
        states = np.zeros((len(frame), len(cols)))
        for j, c in enumerate(cols):
            vals = _numeric(frame[c]).to_numpy(dtype=np.float64)
            bad = ~np.isfinite(vals)
            state_dropped += int(np.sum(bad & (frame[c].astype(str).str.strip() != "").to_numpy()))
            states[:, j] = np.where(bad, 0.0, vals)
    if state_dropped:
        log.warning("dropped %d non-numeric or nested state values", state_dropped)

    if "episode_id" in frame.columns:
        eid = frame["episode_id"].astype(str).str.strip().to_numpy(dtype=object)
        blank = eid == ""
        if blank.any():
            inferred = _infer_episode_ids(pid[blank], t[blank] if t is not None else None)
            eid[blank] = np.array(["inferred:" + e for e in inferred], dtype=object)
    else:
        eid = _infer_episode_ids(pid, t)

    # group rows of one episode together (first-appearance order), then by t
    first_seen: dict[str, int] = {}
    for e in eid:
        first_seen.setdefault(e, len(first_seen))
    ep_rank = np.fromiter((first_seen[e] for e in eid), dtype=np.int64, count=len(eid))
    if t is None:
        order = np.argsort(ep_rank, kind="stable")
        t = np.empty(len(eid), dtype=np.int64)
        sorted_rank = ep_rank[order]
        starts = np.flatnonzero(np.r_[True, sorted_rank[1:] != sorted_rank[:-1]])
        pos = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
        t[order] = pos
    else:
        order = np.lexsort((t, ep_rank))
    keep = np.ones(len(order), dtype=bool)
    same_ep = ep_rank[order][1:] == ep_rank[order][:-1]
    keep[1:] = ~(same_ep & (t[order][1:] == t[order][:-1]))
    order = order[keep]
    rows_dropped = rows_read - len(order)

    summary = LoadSummary(
        rows_read=rows_read,
        rows_dropped=rows_dropped,
        episodes=len(set(eid[order])),
        patients=len(set(pid[order])),
        feature_count=len(names),
        state_values_dropped=state_dropped,
    )
    return Dataset.from_columns(
        patient_id=pid[order],
        episode_id=eid[order],
        t=t[order],
        states=states[order],
        action=action[order],
        reward=reward[order],
        harm=harm[order],
        feature_names=names,
        action_count=action_count,
        summary=summary,
    )


def write_trajectories(
    ds: Dataset, path: str | Path, format: str = "csv", state_format: str = "columns"
) -> None:
    """Write ``ds`` in the schema :func:`load_trajectories` reads.

    Floats are written with ``repr`` so a reload is exact.
    """
    path = Path(path)
    base = ["patient_id", "episode_id", "t", "action", "reward", "harm"]
    if format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for i in range(len(ds)):
                rec: dict[str, Any] = {
                    "patient_id": ds.patient_id[i],
                    "episode_id": ds.episode_id[i],
                    "t": int(ds.t[i]),
                    "action": int(ds.action[i]),
                    "reward": float(ds.reward[i]),
                    "harm": int(ds.harm[i]),
                    "state_json": dict(zip(ds.feature_names, map(float, ds.states[i]))),
                }
                fh.write(json.dumps(rec) + "\n")
        return
    if format != "csv":
        raise InvalidConfig(f"unsupported trajectory format {format!r}")
    if state_format == "json":
        header = base + ["state_json"]
    else:
        header = base + [f"state_{name}" for name in ds.feature_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(ds)):
            row = [
                ds.patient_id[i],
                ds.episode_id[i],
                int(ds.t[i]),
                int(ds.action[i]),
                repr(float(ds.reward[i])),
                int(ds.harm[i]),
            ]
            if state_format == "json":
                row.append(json.dumps(dict(zip(ds.feature_names, map(float, ds.states[i])))))
            else:
                row.extend(repr(float(v)) for v in ds.states[i])
            writer.writerow(row)


# --------------------------------------------------------------------------
# demographics


def normalize_age(value: Any) -> str:
    if value is None:
        return UNKNOWN
    text = str(value).strip()
    if text in AGE_LEVELS:
        return text
    try:
        age = float(text)
    except ValueError:
        key = re.sub(r"[^0-9a-z<>+]", "", text.lower())
        return {
            "<35": "Under35", "under35": "Under35", "below35": "Under35", "1834": "Under35",
            "3549": "35to49", "35to49": "35to49",
            "5064": "50to64", "50to64": "50to64",
            "65+": "Over65", ">=65": "Over65", ">65": "Over65", "over65": "Over65", "65plus": "Over65",
        }.get(key, UNKNOWN)
    if not math.isfinite(age) or age < 0:
        return UNKNOWN
    if age < 35:
        return "Under35"
    if age < 50:
        return "35to49"
    if age < 65:
        return "50to64"
    return "Over65"


def normalize_sex(value: Any) -> str:
    text = str(value or "").strip().lower()
    if text in ("f", "female", "woman", "w"):
        return "Female"
    if text in ("m", "male", "man"):
        return "Male"
    return UNKNOWN


def normalize_race(value: Any) -> str:
    text = str(value or "").strip().lower()
    if not text or text in ("unknown", "unk", "declined", "not reported", "nan", "none", "na"):
        return UNKNOWN
    if "black" in text or "african" in text:
        return "Black"
    if "white" in text or "caucasian" in text:
        return "White"
    if "asian" in text:
        return "Asian"
    if "hispanic" in text or "latin" in text:
        return "Hispanic"
    return "Other"


def _demographics_table(source: pd.DataFrame | str | Path) -> pd.DataFrame:
    if isinstance(source, (str, Path)):
        source = pd.read_csv(source, dtype=str, keep_default_na=False)
    frame = _sanitize_frame(source)
    if "patient_id" not in frame.columns:
        raise MissingRequiredColumn("patient_id")

    def pick(*names: str) -> pd.Series:
        for n in names:
            if n in frame.columns:
                return frame[n]
        return pd.Series([""] * len(frame), index=frame.index)

    return pd.DataFrame(
        {
            "patient_id": frame["patient_id"].astype(str).str.strip(),
            "age_bin": [normalize_age(v) for v in pick("age_bin", "age", "age_group")],
            "sex": [normalize_sex(v) for v in pick("sex", "gender")],
            "race": [normalize_race(v) for v in pick("race", "race_ethnicity", "ethnicity")],
        }
    )


def merge_demographics(
    ds: Dataset, sources: Sequence[pd.DataFrame | str | Path]
) -> Dataset:
    """Attach patient demographics, preferring the most complete record.

    Ties in completeness go to the earlier source (and the earlier row
    within a source). Patients found nowhere get an all-Unknown record.
    """
    best: dict[str, Demographics] = {}
    for source in sources:
        for pid, age, sex, race in _demographics_table(source).itertuples(index=False):
            rec = Demographics(age, sex, race)
            cur = best.get(pid)
            if cur is None or rec.unknown_count < cur.unknown_count:
                best[pid] = rec
    patients = dict.fromkeys(ds.patient_id)
    return ds.with_demographics({p: best.get(p, Demographics()) for p in patients})


def write_demographics(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "age_bin", "sex", "race"])
        for pid in dict.fromkeys(ds.patient_id):
            d = ds.demographics_for(pid)
            writer.writerow([pid, d.age_bin, d.sex, d.race])


# --------------------------------------------------------------------------
# splits


def split_sizes(n_episodes: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = math.floor(spec.train_frac * n_episodes + 1e-9)
    n_calib = math.floor(spec.calib_frac * n_episodes + 1e-9)
    return n_train, n_calib, n_episodes - n_train - n_calib


def temporal_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Split by episode in load order into train, calibration and test."""
    sizes = split_sizes(ds.n_episodes, spec)
    if min(sizes) < 1:
        raise InsufficientEpisodes(
            f"{ds.n_episodes} episodes give split sizes {sizes}; every split needs one"
        )
    a, b = sizes[0], sizes[0] + sizes[1]
    ords = np.arange(ds.n_episodes)
    return (
        ds.select_episodes(ords[:a]),
        ds.select_episodes(ords[a:b]),
        ds.select_episodes(ords[b:]),
    )
