"""Raw GPS/signal records to fixed-length tokenized training sequences.

Per-user stages: sort by time, optionally resample to one record per
interval, project to meters, optionally collapse same-cell runs into stays
and drop short ones, compute speeds, flag stops (< 4 km/h), cut the record
stream at stop records, tokenize, and window to the model's max sequence
length. Two profiles mirror the two data styles:

  "gps"    — dense GPS logs: resample on, stay filtering off
  "signal" — cell-signal logs: resample off, stay filtering on

Everything is deterministic given (input bytes, config, seed).
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass

from .grid import GridSpec, project
from .vocab import Vocabulary, tokenize

STOP_SPEED_KMH = 4.0
MIN_STAY_SECONDS = 300
MIN_TRAJECTORY_RECORDS = 10
RESAMPLE_INTERVAL_S = 60


@dataclass
class RawRecord:
    user_id: str
    timestamp: int  # Unix seconds, > 0
    lat: float
    lon: float
    label: str | None = None
    # filled in by the pipeline
    x: float = 0.0
    y: float = 0.0
    speed_kmh: float = 0.0
    is_stop: bool = False
    duplicate_ts: bool = False


@dataclass
class Trajectory:
    """Tokenized sequence with a leading SOS tuple at index 0.

    `ids[0]` is the per-level SOS tuple and `timestamps[0]` repeats the first
    real timestamp; `length` counts real locations only.
    """

    user: str
    ids: list[tuple[int, ...]]
    timestamps: list[int]
    label: str | None = None

    @property
    def length(self) -> int:
        return len(self.ids) - 1


@dataclass
class DatasetSplit:
    pretrain: list[int]
    finetune_train: list[int]
    finetune_val: list[int]
    finetune_test: list[int]
    seed: int = 0


@dataclass
class PipelineConfig:
    profile: str = "gps"  # "gps" | "signal"
    ref_lat: float = 0.0
    resample_interval: int = RESAMPLE_INTERVAL_S
    stop_speed_kmh: float = STOP_SPEED_KMH
    min_stay_seconds: int = MIN_STAY_SECONDS
    min_trajectory_records: int = MIN_TRAJECTORY_RECORDS
    max_seq_len: int = 32

    def __post_init__(self):
        if self.profile not in ("gps", "signal"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2 (SOS plus one location)")


# ---------------------------------------------------------------------------
# per-user preprocessing stages
# ---------------------------------------------------------------------------

def resample(records: list[RawRecord], interval: int = RESAMPLE_INTERVAL_S) -> list[RawRecord]:
    """Keep the first record in each interval-length bucket (per user, sorted).

    Buckets are anchored at the user's first timestamp, so records already
    spaced >= interval apart pass through unchanged.
    """
    if not records:
        return []
    t0 = records[0].timestamp
    kept = []
    last_bucket = None
    for r in records:
        bucket = (r.timestamp - t0) // interval
        if bucket != last_bucket:
            kept.append(r)
            last_bucket = bucket
    return kept


def compute_velocity(records: list[RawRecord]) -> list[RawRecord]:
    """Instantaneous speed in km/h between consecutive projected points.

    The first record copies the second's speed; a zero time delta repeats
    the previous record's speed and flags the duplicate timestamp.
    """
    if len(records) < 2:
        raise ValueError("velocity needs at least two records per user")
    for i in range(1, len(records)):
        prev, cur = records[i - 1], records[i]
        dt = cur.timestamp - prev.timestamp
        if dt <= 0:
            cur.speed_kmh = prev.speed_kmh
            cur.duplicate_ts = True
            continue
        dist_m = math.hypot(cur.x - prev.x, cur.y - prev.y)
        cur.speed_kmh = (dist_m / dt) * 3.6
    records[0].speed_kmh = records[1].speed_kmh
    return records


def mark_stops(records: list[RawRecord], threshold_kmh: float = STOP_SPEED_KMH) -> list[RawRecord]:
    """Flag stop records: speed strictly below the threshold."""
    for r in records:
        r.is_stop = r.speed_kmh < threshold_kmh
    return records


def filter_short_stays(
    records: list[RawRecord], spec: GridSpec, min_duration: int = MIN_STAY_SECONDS
) -> list[RawRecord]:
    """Collapse same-finest-cell runs into single stay records; drop short ones.

    A stay's duration is last minus first timestamp of the run; the collapsed
    record keeps the arrival (first) record's fields. Lone records have
    duration zero and are dropped.
    """
    r_fine = spec.scales[-1]
    x0, y0 = spec.origin

    def cell(r: RawRecord):
        return (math.floor((r.x - x0) / r_fine), math.floor((r.y - y0) / r_fine))

    kept = []
    i = 0
    while i < len(records):
        j = i
        while j + 1 < len(records) and cell(records[j + 1]) == cell(records[i]):
            j += 1
        duration = records[j].timestamp - records[i].timestamp
        if duration >= min_duration:
            kept.append(records[i])
        i = j + 1
    return kept


def segment_trajectories(
    records: list[RawRecord], min_len: int = MIN_TRAJECTORY_RECORDS
) -> list[list[RawRecord]]:
    """Cut the stream at stop records; a segment spans stop..stop inclusive.

    Consecutive segments share their boundary stop record. Only segments with
    strictly more than `min_len` records survive; records before the first
    stop or after the last are discarded.
    """
    stop_idx = [i for i, r in enumerate(records) if r.is_stop]
    segments = []
    for a, b in zip(stop_idx, stop_idx[1:]):
        seg = records[a : b + 1]
        if len(seg) > min_len:
            segments.append(seg)
    return segments


def window(traj: Trajectory, max_seq_len: int = 32) -> list[Trajectory]:
    """Split into non-overlapping chunks of <= max_seq_len - 1 real locations.

    Each chunk is re-prefixed with SOS; a trailing chunk of a single location
    is dropped (nothing to predict from it).
    """
    sos = traj.ids[0]
    reals = traj.ids[1:]
    times = traj.timestamps[1:]
    chunk = max_seq_len - 1
    out = []
    for start in range(0, len(reals), chunk):
        ids = reals[start : start + chunk]
        ts = times[start : start + chunk]
        if len(ids) <= 1:
            continue
        out.append(
            Trajectory(
                user=traj.user,
                ids=[sos] + ids,
                timestamps=[ts[0]] + ts,
                label=traj.label,
            )
        )
    return out


def split(n_trajectories: int, seed: int, fractions=(0.8, 0.8, 0.1)) -> DatasetSplit:
    """Deterministic shuffled split: pretrain vs finetune, then train/val/test.

    `fractions` = (pretrain share of total, train share of the finetune pool,
    val share of the finetune pool); the remainder of the pool is test.
    """
    if n_trajectories < 10:
        raise ValueError(f"need at least 10 trajectories to split, got {n_trajectories}")
    idx = list(range(n_trajectories))
    random.Random(seed).shuffle(idx)
    n_pre = int(n_trajectories * fractions[0])
    pool = idx[n_pre:]
    n_tr = int(len(pool) * fractions[1])
    n_val = int(len(pool) * fractions[2])
    return DatasetSplit(
        pretrain=idx[:n_pre],
        finetune_train=pool[:n_tr],
        finetune_val=pool[n_tr : n_tr + n_val],
        finetune_test=pool[n_tr + n_val :],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# end-to-end assembly
# ---------------------------------------------------------------------------

def _majority_label(records: list[RawRecord]) -> str | None:
    counts: dict[str, int] = {}
    for r in records:
        if r.label:
            counts[r.label] = counts.get(r.label, 0) + 1
    if not counts:
        return None
    best = max(counts.values())
    return sorted(k for k, v in counts.items() if v == best)[0]


def _tokenize_segment(seg: list[RawRecord], vocab: Vocabulary) -> Trajectory:
    ids = [vocab.sos_tuple()]
    ts = [seg[0].timestamp]
    for r in seg:
        ids.append(tokenize(r.x, r.y, vocab).ids)
        ts.append(r.timestamp)
    return Trajectory(user=seg[0].user_id, ids=ids, timestamps=ts, label=_majority_label(seg))


def preprocess(
    records: list[RawRecord], vocab: Vocabulary, cfg: PipelineConfig
) -> list[Trajectory]:
    """Run the full per-user pipeline and return windowed tokenized trajectories.

    Users are processed independently; output order is sorted by
    (user_id, first timestamp) so parallel ingestion stays deterministic.
    """
    by_user: dict[str, list[RawRecord]] = {}
    for r in records:
        if r.timestamp <= 0:
            raise ValueError(f"non-positive timestamp {r.timestamp} for user {r.user_id}")
        by_user.setdefault(r.user_id, []).append(r)

    trajs: list[Trajectory] = []
    for user in sorted(by_user):
        rs = sorted(by_user[user], key=lambda r: r.timestamp)
        if cfg.profile == "gps":
            rs = resample(rs, cfg.resample_interval)
        for r in rs:
            r.x, r.y = project(r.lat, r.lon, cfg.ref_lat)
        if cfg.profile == "signal":
            rs = filter_short_stays(rs, vocab.spec, cfg.min_stay_seconds)
        if len(rs) < 2:
            continue
        compute_velocity(rs)
        mark_stops(rs, cfg.stop_speed_kmh)
        for seg in segment_trajectories(rs, cfg.min_trajectory_records):
            trajs.extend(window(_tokenize_segment(seg, vocab), cfg.max_seq_len))
    return trajs


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_csv(path) -> list[RawRecord]:
    """Read `user_id,timestamp,lat,lon[,label]` rows (UTF-8, with header)."""
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"user_id", "timestamp", "lat", "lon"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"CSV must have columns {sorted(required)}, got {reader.fieldnames}")
        for row in reader:
            records.append(
                RawRecord(
                    user_id=row["user_id"],
                    timestamp=int(row["timestamp"]),
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    label=row.get("label") or None,
                )
            )
    return records


def iter_csv_points(path, ref_lat: float = 0.0):
    """Yield projected (x, y) for every CSV record (vocabulary building)."""
    for r in read_csv(path):
        yield project(r.lat, r.lon, ref_lat)


def write_trajectories(trajs: list[Trajectory], path):
    """Newline-delimited JSON, one trajectory per line, SOS tuple included."""
    with open(path, "w", encoding="utf-8") as f:
        for t in trajs:
            f.write(
                json.dumps(
                    {
                        "user": t.user,
                        "ids": [list(tup) for tup in t.ids],
                        "ts": t.timestamps,
                        "label": t.label,
                    }
                )
            )
            f.write("\n")


def read_trajectories(path) -> list[Trajectory]:
    trajs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            doc = json.loads(line)
            trajs.append(
                Trajectory(
                    user=doc["user"],
                    ids=[tuple(tup) for tup in doc["ids"]],
                    timestamps=list(doc["ts"]),
                    label=doc.get("label"),
                )
            )
    return trajs


def split_to_json(s: DatasetSplit) -> dict:
    return {
        "seed": s.seed,
        "pretrain": s.pretrain,
        "finetune_train": s.finetune_train,
        "finetune_val": s.finetune_val,
        "finetune_test": s.finetune_test,
    }


def split_from_json(doc: dict) -> DatasetSplit:
    return DatasetSplit(
        pretrain=list(doc["pretrain"]),
        finetune_train=list(doc["finetune_train"]),
        finetune_val=list(doc["finetune_val"]),
        finetune_test=list(doc["finetune_test"]),
        seed=int(doc.get("seed", 0)),
    )
