"""Check-in ingestion, vocabularies, splits, trajectories, and instances.

The pipeline is: load raw rows -> global chronological split -> build the
vocabulary from the training split -> assemble per-user sequences with
trajectory boundaries -> materialize prediction instances. Every stage is
a pure function of its inputs, so instance counts are deterministic given
(data, ratios, gap threshold, suffix length).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400

# Sentinel for check-ins whose POI is outside the training vocabulary.
UNKNOWN_POI = -1

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(RuntimeError):
    """Fatal ingestion or preprocessing failure."""


@dataclass(frozen=True)
class CheckIn:
    """One visit record with POI metadata."""
    user_id: str
    poi_id: str
    category_id: str
    lat: float
    lon: float
    timestamp: int


def time_of_day_fraction(ts: int) -> float:
    """Fraction of the day in [0, 1) at timestamp ``ts``."""
    return (ts % SECONDS_PER_DAY) / SECONDS_PER_DAY


def hour_of_day(ts: int) -> int:
    return int((ts % SECONDS_PER_DAY) // SECONDS_PER_HOUR)


def day_of_week(ts: int) -> int:
    """Day of week in [0, 6], 0 = Monday."""
    return int((ts // SECONDS_PER_DAY + 3) % 7)


def _parse_timestamp(text: str, fmt: str) -> int:
    if fmt == "epoch":
        return int(float(text))
    return int(time.mktime(time.strptime(text, fmt)))


def load_checkins(path: str | Path, delimiter: str = ",",
                  timestamp_format: str = "epoch") -> list[CheckIn]:
    """Read delimiter-separated check-in rows.

    Expected columns: user_id, poi_id, category_id, latitude, longitude,
    timestamp. Malformed rows are skipped with a warning; more than 10%
    skipped rows aborts ingestion.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"check-in file not found: {path}")

    records: list[CheckIn] = []
    skipped = 0
    total = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            total += 1
            parts = line.split(delimiter)
            if len(parts) != 6:
                skipped += 1
                logger.warning("line %d: expected 6 fields, got %d", line_no, len(parts))
                continue
            user_id, poi_id, category_id, lat_s, lon_s, ts_s = (p.strip() for p in parts)
            try:
                lat = float(lat_s)
                lon = float(lon_s)
                ts = _parse_timestamp(ts_s, timestamp_format)
            except (ValueError, OverflowError):
                skipped += 1
                logger.warning("line %d: unparseable coordinates or timestamp", line_no)
                continue
            if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or ts <= 0:
                skipped += 1
                logger.warning("line %d: out-of-range coordinate or timestamp", line_no)
                continue
            records.append(CheckIn(user_id, poi_id, category_id, lat, lon, ts))

    if total > 0 and skipped / total > 0.10:
        raise DatasetError(
            f"{skipped}/{total} rows skipped (> 10%); refusing to continue"
        )
    if skipped:
        logger.warning("skipped %d of %d rows", skipped, total)
    return records


def chronological_split(checkins: list[CheckIn],
                        ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                        ) -> tuple[list[CheckIn], list[CheckIn], list[CheckIn]]:
    """Sort globally by timestamp (stable for ties) and cut at the ratios."""
    if any(r <= 0 for r in ratios):
        raise DatasetError("split ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError("split ratios must sum to 1")
    n = len(checkins)
    if n < 10:
        raise DatasetError(f"need at least 10 check-ins to split, got {n}")

    ordered = sorted(checkins, key=lambda c: c.timestamp)
    cut1 = int(np.floor(ratios[0] * n))
    cut2 = int(np.floor((ratios[0] + ratios[1]) * n))
    return ordered[:cut1], ordered[cut1:cut2], ordered[cut2:]


def segment_trajectories(timestamps: np.ndarray, gap_threshold: float) -> np.ndarray:
    """Boundary positions of a time-ordered sequence.

    Returns indices ``i`` such that a new trajectory starts at position
    ``i`` because ``timestamps[i] - timestamps[i-1] > gap_threshold``.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if timestamps.size <= 1:
        return np.empty(0, dtype=np.int64)
    gaps = np.diff(timestamps)
    if np.any(gaps < 0):
        raise DatasetError("check-ins must be time-ordered before segmentation")
    return np.flatnonzero(gaps > gap_threshold) + 1


@dataclass
class Vocabulary:
    """Training-split index bijections plus per-POI metadata.

    ``pad_poi`` (== num_pois) is a reserved embedding row used to left-pad
    short suffixes; it never appears as a scoring candidate.
    """
    poi_ids: list[str]
    user_ids: list[str]
    category_ids: list[str]
    poi_category: np.ndarray   # (P,) int32
    poi_lat: np.ndarray        # (P,) float64
    poi_lon: np.ndarray        # (P,) float64
    coord_mean: np.ndarray     # (2,) lat/lon mean over training POIs
    coord_std: np.ndarray      # (2,) lat/lon std, floored away from zero
    poi_index: dict[str, int] = field(default_factory=dict)
    user_index: dict[str, int] = field(default_factory=dict)
    category_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.poi_index:
            self.poi_index = {p: i for i, p in enumerate(self.poi_ids)}
        if not self.user_index:
            self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        if not self.category_index:
            self.category_index = {c: i for i, c in enumerate(self.category_ids)}

    @property
    def num_pois(self) -> int:
        return len(self.poi_ids)

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_categories(self) -> int:
        return len(self.category_ids)

    @property
    def pad_poi(self) -> int:
        return self.num_pois

    def standardized_coords(self) -> np.ndarray:
        """(P, 2) z-scored latitude/longitude."""
        coords = np.stack([self.poi_lat, self.poi_lon], axis=1)
        return (coords - self.coord_mean) / self.coord_std


def build_vocabulary(train_checkins: list[CheckIn]) -> Vocabulary:
    """Index users, POIs, and categories observed in the training split."""
    poi_ids: list[str] = []
    user_ids: list[str] = []
    category_ids: list[str] = []
    poi_seen: dict[str, int] = {}
    user_seen: dict[str, int] = {}
    cat_seen: dict[str, int] = {}
    poi_cat: list[int] = []
    poi_lat: list[float] = []
    poi_lon: list[float] = []

    for rec in train_checkins:
        if rec.user_id not in user_seen:
            user_seen[rec.user_id] = len(user_ids)
            user_ids.append(rec.user_id)
        if rec.category_id not in cat_seen:
            cat_seen[rec.category_id] = len(category_ids)
            category_ids.append(rec.category_id)
        if rec.poi_id not in poi_seen:
            poi_seen[rec.poi_id] = len(poi_ids)
            poi_ids.append(rec.poi_id)
            poi_cat.append(cat_seen[rec.category_id])
            poi_lat.append(rec.lat)
            poi_lon.append(rec.lon)

    lat = np.asarray(poi_lat, dtype=np.float64)
    lon = np.asarray(poi_lon, dtype=np.float64)
    coords = np.stack([lat, lon], axis=1) if len(poi_ids) else np.zeros((0, 2))
    mean = coords.mean(axis=0) if len(poi_ids) else np.zeros(2)
    std = coords.std(axis=0) if len(poi_ids) else np.ones(2)
    std = np.where(std < 1e-8, 1.0, std)

    return Vocabulary(
        poi_ids=poi_ids,
        user_ids=user_ids,
        category_ids=category_ids,
        poi_category=np.asarray(poi_cat, dtype=np.int32),
        poi_lat=lat,
        poi_lon=lon,
        coord_mean=mean,
        coord_std=std,
    )


@dataclass
class UserSequences:
    """All users' chronological check-ins in flat arrays.

    ``offsets[u]:offsets[u+1]`` slices user ``u``'s row range. ``poi`` holds
    the vocabulary index or UNKNOWN_POI; ``split`` is 0/1/2 for
    train/val/test; ``traj`` is a globally unique trajectory id assigned
    within each (user, split) segment.
    """
    offsets: np.ndarray   # (U+1,) int64
    poi: np.ndarray       # (total,) int32
    ts: np.ndarray        # (total,) int64
    split: np.ndarray     # (total,) int8
    traj: np.ndarray      # (total,) int32

    def user_slice(self, user: int) -> slice:
        return slice(int(self.offsets[user]), int(self.offsets[user + 1]))

    @property
    def num_users(self) -> int:
        return len(self.offsets) - 1


def assemble_sequences(splits: tuple[list[CheckIn], list[CheckIn], list[CheckIn]],
                       vocab: Vocabulary, gap_threshold_seconds: float) -> UserSequences:
    """Build per-user chronological sequences with trajectory boundaries.

    Only users present in the training vocabulary are kept; their check-ins
    from all three splits are concatenated in time order. Trajectories are
    segmented independently within each (user, split) segment.
    """
    per_user: dict[int, list[tuple[int, int, int]]] = {u: [] for u in range(vocab.num_users)}
    for split_idx, records in enumerate(splits):
        for rec in records:
            user = vocab.user_index.get(rec.user_id)
            if user is None:
                continue
            poi = vocab.poi_index.get(rec.poi_id, UNKNOWN_POI)
            per_user[user].append((rec.timestamp, split_idx, poi))

    offsets = [0]
    poi_rows: list[int] = []
    ts_rows: list[int] = []
    split_rows: list[int] = []
    traj_rows: list[int] = []
    next_traj = 0

    for user in range(vocab.num_users):
        rows = per_user[user]
        # The global split is chronological, so sorting by (split, timestamp)
        # equals sorting by time with the split cut deciding ties at the cut.
        rows.sort(key=lambda r: (r[1], r[0]))
        for split_idx in (TRAIN, VAL, TEST):
            seg = [r for r in rows if r[1] == split_idx]
            if not seg:
                continue
            stamps = np.asarray([r[0] for r in seg], dtype=np.int64)
            boundaries = set(segment_trajectories(stamps, gap_threshold_seconds).tolist())
            for i, (ts, _s, poi) in enumerate(seg):
                if i == 0 or i in boundaries:
                    next_traj += 1
                poi_rows.append(poi)
                ts_rows.append(ts)
                split_rows.append(split_idx)
                traj_rows.append(next_traj - 1)
        offsets.append(len(poi_rows))

    return UserSequences(
        offsets=np.asarray(offsets, dtype=np.int64),
        poi=np.asarray(poi_rows, dtype=np.int32),
        ts=np.asarray(ts_rows, dtype=np.int64),
        split=np.asarray(split_rows, dtype=np.int8),
        traj=np.asarray(traj_rows, dtype=np.int32),
    )


@dataclass
class Instances:
    """Columnar prediction instances for one split.

    ``step`` is the 0-based position of the target inside the user's full
    sequence; the observed history is exactly positions [0, step). The
    suffix holds the last ``k`` history POIs, left-padded with ``pad_poi``.
    """
    user: np.ndarray        # (n,) int32
    step: np.ndarray        # (n,) int32
    source: np.ndarray      # (n,) int32
    target: np.ndarray      # (n,) int32
    suffix: np.ndarray      # (n, k) int32
    suffix_len: np.ndarray  # (n,) int32
    query_time: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.user)

    @classmethod
    def empty(cls, k: int) -> "Instances":
        return cls(
            user=np.empty(0, dtype=np.int32),
            step=np.empty(0, dtype=np.int32),
            source=np.empty(0, dtype=np.int32),
            target=np.empty(0, dtype=np.int32),
            suffix=np.empty((0, k), dtype=np.int32),
            suffix_len=np.empty(0, dtype=np.int32),
            query_time=np.empty(0, dtype=np.int64),
        )


def _make_suffix(pois: np.ndarray, end: int, k: int, pad_poi: int) -> tuple[np.ndarray, int]:
    """Last-k history POIs ending at position ``end`` (exclusive)."""
    lo = max(0, end - k)
    window = pois[lo:end]
    # Unknown POIs cannot be embedded; they become pad and are masked out.
    window = np.where(window == UNKNOWN_POI, pad_poi, window).astype(np.int32)
    out = np.full(k, pad_poi, dtype=np.int32)
    out[k - len(window):] = window
    return out, int(np.sum(window != pad_poi))


def build_instances(sequences: UserSequences, vocab: Vocabulary, k: int,
                    mode: str, split: int = TRAIN,
                    ) -> tuple[Instances, dict[str, int]]:
    """Materialize prediction instances.

    mode="train": one instance per within-trajectory position with a
    successor, over the training split. mode="eval": one instance per
    trajectory of the chosen split, using its last check-in as target and
    the preceding check-in as source; the history still spans the user's
    entire earlier sequence. Instances whose target (or source) POI is
    outside the training vocabulary are dropped and counted.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train":
        split = TRAIN

    users: list[int] = []
    steps: list[int] = []
    sources: list[int] = []
    targets: list[int] = []
    suffixes: list[np.ndarray] = []
    suffix_lens: list[int] = []
    query_times: list[int] = []
    dropped = {"unknown_target": 0, "unknown_source": 0, "short_trajectory": 0}

    pad = vocab.pad_poi
    for user in range(sequences.num_users):
        sl = sequences.user_slice(user)
        pois = sequences.poi[sl]
        ts = sequences.ts[sl]
        spl = sequences.split[sl]
        traj = sequences.traj[sl]
        n = len(pois)

        if mode == "train":
            candidate_positions = [
                t for t in range(1, n)
                if spl[t] == TRAIN and spl[t - 1] == TRAIN and traj[t] == traj[t - 1]
            ]
        else:
            candidate_positions = []
            t = 0
            while t < n:
                if spl[t] != split:
                    t += 1
                    continue
                run_end = t
                while run_end + 1 < n and traj[run_end + 1] == traj[t]:
                    run_end += 1
                if run_end > t:
                    candidate_positions.append(run_end)
                else:
                    dropped["short_trajectory"] += 1
                t = run_end + 1

        for t in candidate_positions:
            target = int(pois[t])
            source = int(pois[t - 1])
            if target == UNKNOWN_POI:
                dropped["unknown_target"] += 1
                continue
            if source == UNKNOWN_POI:
                dropped["unknown_source"] += 1
                continue
            suffix, slen = _make_suffix(pois, t, k, pad)
            users.append(user)
            steps.append(t)
            sources.append(source)
            targets.append(target)
            suffixes.append(suffix)
            suffix_lens.append(slen)
            query_times.append(int(ts[t - 1]))

    if not users:
        return Instances.empty(k), dropped
    inst = Instances(
        user=np.asarray(users, dtype=np.int32),
        step=np.asarray(steps, dtype=np.int32),
        source=np.asarray(sources, dtype=np.int32),
        target=np.asarray(targets, dtype=np.int32),
        suffix=np.stack(suffixes).astype(np.int32),
        suffix_len=np.asarray(suffix_lens, dtype=np.int32),
        query_time=np.asarray(query_times, dtype=np.int64),
    )
    return inst, dropped


@dataclass
class InstanceStore:
    """Vocabulary + sequences + per-split instances, ready for training."""
    vocab: Vocabulary
    sequences: UserSequences
    train: Instances
    val: Instances
    test: Instances
    meta: dict

    def instances_for(self, split_name: str) -> Instances:
        return {"train": self.train, "val": self.val, "test": self.test}[split_name]


def build_store(checkins: list[CheckIn], ratios: tuple[float, float, float],
                gap_threshold_hours: float, suffix_len: int) -> InstanceStore:
    """Run the full preprocessing pipeline on loaded check-ins."""
    splits = chronological_split(checkins, ratios)
    vocab = build_vocabulary(splits[0])
    sequences = assemble_sequences(splits, vocab, gap_threshold_hours * SECONDS_PER_HOUR)

    train, dropped_train = build_instances(sequences, vocab, suffix_len, mode="train")
    val, dropped_val = build_instances(sequences, vocab, suffix_len, mode="eval", split=VAL)
    test, dropped_test = build_instances(sequences, vocab, suffix_len, mode="eval", split=TEST)

    total_users = len({c.user_id for c in checkins})
    meta = {
        "format_version": 1,
        "suffix_len": suffix_len,
        "gap_threshold_hours": gap_threshold_hours,
        "ratios": list(ratios),
        "num_checkins": len(checkins),
        "num_raw_users": total_users,
        "dropped": {"train": dropped_train, "val": dropped_val, "test": dropped_test},
    }
    return InstanceStore(vocab=vocab, sequences=sequences,
                         train=train, val=val, test=test, meta=meta)


# ---------------------------------------------------------------------------
# Serialization: a single .npz with named arrays plus a JSON metadata blob.
# Layout is documented in the README.
# ---------------------------------------------------------------------------

def save_store(store: InstanceStore, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "meta_json": np.frombuffer(json.dumps(store.meta).encode("utf-8"), dtype=np.uint8),
        "vocab_poi_ids": np.asarray(store.vocab.poi_ids, dtype=object),
        "vocab_user_ids": np.asarray(store.vocab.user_ids, dtype=object),
        "vocab_category_ids": np.asarray(store.vocab.category_ids, dtype=object),
        "poi_category": store.vocab.poi_category,
        "poi_lat": store.vocab.poi_lat,
        "poi_lon": store.vocab.poi_lon,
        "coord_mean": store.vocab.coord_mean,
        "coord_std": store.vocab.coord_std,
        "seq_offsets": store.sequences.offsets,
        "seq_poi": store.sequences.poi,
        "seq_ts": store.sequences.ts,
        "seq_split": store.sequences.split,
        "seq_traj": store.sequences.traj,
    }
    for name, inst in (("train", store.train), ("val", store.val), ("test", store.test)):
        arrays[f"{name}_user"] = inst.user
        arrays[f"{name}_step"] = inst.step
        arrays[f"{name}_source"] = inst.source
        arrays[f"{name}_target"] = inst.target
        arrays[f"{name}_suffix"] = inst.suffix
        arrays[f"{name}_suffix_len"] = inst.suffix_len
        arrays[f"{name}_query_time"] = inst.query_time
    np.savez_compressed(path, **arrays)


def load_store(path: str | Path) -> InstanceStore:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"instance store not found: {path}")
    with np.load(path, allow_pickle=True) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        vocab = Vocabulary(
            poi_ids=[str(x) for x in data["vocab_poi_ids"]],
            user_ids=[str(x) for x in data["vocab_user_ids"]],
            category_ids=[str(x) for x in data["vocab_category_ids"]],
            poi_category=data["poi_category"],
            poi_lat=data["poi_lat"],
            poi_lon=data["poi_lon"],
            coord_mean=data["coord_mean"],
            coord_std=data["coord_std"],
        )
        sequences = UserSequences(
            offsets=data["seq_offsets"],
            poi=data["seq_poi"],
            ts=data["seq_ts"],
            split=data["seq_split"],
            traj=data["seq_traj"],
        )
        parts = {}
        for name in SPLIT_NAMES:
            parts[name] = Instances(
                user=data[f"{name}_user"],
                step=data[f"{name}_step"],
                source=data[f"{name}_source"],
                target=data[f"{name}_target"],
                suffix=data[f"{name}_suffix"],
                suffix_len=data[f"{name}_suffix_len"],
                query_time=data[f"{name}_query_time"],
            )
    return InstanceStore(vocab=vocab, sequences=sequences, train=parts["train"],
                         val=parts["val"], test=parts["test"], meta=meta)
