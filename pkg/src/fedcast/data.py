"""Dataset ingestion, daily aggregation, cleaning, windowing, synthesis.

The pipeline turns raw per-transaction logs (or a wide daily matrix, or
a synthetic generator) into one canonical form: a list of per-client
daily series, each a contiguous run of calendar days with a missing-day
flag vector.  Downstream stages (clustering, window extraction) consume
only the canonical form.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

TRANSACTION_COLUMNS = ("station_id", "transaction_id", "date", "time", "energy_kwh")

_TIME_FORMATS = ("%H:%M:%S", "%H:%M")


class IngestError(ValueError):
    """The input file cannot be used (bad header or too many bad rows)."""


@dataclass(frozen=True)
class TransactionRecord:
    station_id: str
    transaction_id: str
    date: dt.date
    time: dt.time
    energy_kwh: float


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


@dataclass
class DailySeries:
    """One client's daily totals over a contiguous span of days."""

    client_id: str
    start: dt.date
    values: np.ndarray
    missing: np.ndarray  # True where the day had no data and was zero-filled

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape != self.missing.shape or self.values.ndim != 1:
            raise ValueError("values and missing must be equal-length 1-D arrays")

    @property
    def end(self) -> dt.date:
        return self.start + dt.timedelta(days=len(self.values) - 1)

    @property
    def last_active(self) -> dt.date:
        """Last day that actually had data."""
        active = np.flatnonzero(~self.missing)
        if active.size == 0:
            return self.start - dt.timedelta(days=1)
        return self.start + dt.timedelta(days=int(active[-1]))


def _parse_time(text: str) -> dt.time:
    for fmt in _TIME_FORMATS:
        try:
            return dt.datetime.strptime(text.strip(), fmt).time()
        except ValueError:
            continue
    raise ValueError(f"unparseable time {text!r}")


def _parse_row(row: dict, line: int) -> TransactionRecord:
    missing = [c for c in TRANSACTION_COLUMNS if row.get(c) in (None, "")]
    if missing:
        raise ValueError(f"missing fields: {', '.join(missing)}")
    date = dt.date.fromisoformat(row["date"].strip())
    time = _parse_time(row["time"])
    energy = float(row["energy_kwh"])
    if not np.isfinite(energy):
        raise ValueError("energy_kwh is not finite")
    if energy < 0:
        raise ValueError(f"negative energy {energy}")
    return TransactionRecord(
        station_id=row["station_id"].strip(),
        transaction_id=row["transaction_id"].strip(),
        date=date,
        time=time,
        energy_kwh=energy,
    )


def ingest_transactions(
    path, max_reject_fraction: float = 0.1
) -> tuple[list[TransactionRecord], list[RejectedRow]]:
    """Read a charging-transaction CSV, collecting malformed rows.

    Expected header: station_id, transaction_id, date (ISO), time
    (HH:MM[:SS]), energy_kwh (non-negative float).  Malformed rows are
    reported, not silently dropped; more than `max_reject_fraction` of
    them aborts the run.
    """
    records: list[TransactionRecord] = []
    rejects: list[RejectedRow] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return [], []
        missing = [c for c in TRANSACTION_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"{path}: header lacks columns: {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                records.append(_parse_row(row, line))
            except (ValueError, TypeError) as e:
                rejects.append(RejectedRow(line=line, reason=str(e)))
    total = len(records) + len(rejects)
    if total and len(rejects) > max_reject_fraction * total:
        raise IngestError(
            f"{path}: {len(rejects)} of {total} rows malformed "
            f"(threshold {max_reject_fraction:.0%}); refusing to continue"
        )
    return records, rejects


def aggregate_daily(records: list[TransactionRecord]) -> list[DailySeries]:
    """Sum energy per station per calendar day.

    Each station's series spans its own [first, last] transaction day;
    days with no transactions inside the span are zero-filled and
    flagged.  Ordered by station id.
    """
    by_station: dict[str, dict[dt.date, float]] = {}
    for rec in records:
        days = by_station.setdefault(rec.station_id, {})
        days[rec.date] = days.get(rec.date, 0.0) + rec.energy_kwh
    out: list[DailySeries] = []
    for sid in sorted(by_station):
        days = by_station[sid]
        start, end = min(days), max(days)
        n = (end - start).days + 1
        values = np.zeros(n)
        missing = np.ones(n, dtype=bool)
        for day, total in days.items():
            i = (day - start).days
            values[i] = total
            missing[i] = False
        out.append(DailySeries(client_id=sid, start=start, values=values, missing=missing))
    return out


@dataclass
class CleaningReport:
    kept: list[str] = field(default_factory=list)
    dropped: list[dict] = field(default_factory=list)
    end_date: dt.date | None = None
    slack_days: int = 7


def clean_stations(
    series_list: list[DailySeries],
    slack_days: int = 7,
    end_date: dt.date | None = None,
) -> tuple[list[DailySeries], CleaningReport]:
    """Drop stations that went quiet before the end of the study window.

    A station is kept when its last active day is within `slack_days` of
    `end_date` (default: the latest active day over all stations).
    """
    if slack_days < 0:
        raise ValueError("slack_days must be >= 0")
    report = CleaningReport(slack_days=slack_days)
    if not series_list:
        return [], report
    if end_date is None:
        end_date = max(s.last_active for s in series_list)
    report.end_date = end_date
    cutoff = end_date - dt.timedelta(days=slack_days)
    kept: list[DailySeries] = []
    for s in series_list:
        if s.last_active < cutoff:
            report.dropped.append(
                {
                    "client_id": s.client_id,
                    "last_active": s.last_active.isoformat(),
                    "reason": f"inactive after {s.last_active.isoformat()}",
                }
            )
        else:
            kept.append(s)
            report.kept.append(s.client_id)
    return kept, report


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowSet:
    split: str
    inputs: np.ndarray  # [n, lookback]
    targets: np.ndarray  # [n, horizon]

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class SplitWindows:
    train: WindowSet
    val: WindowSet
    test: WindowSet

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def make_windows(
    values,
    lookback: int,
    horizon: int,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> SplitWindows:
    """Stride-1 (input, target) windows with a chronological split.

    A window's input is `values[t - lookback : t]` and its target is
    `values[t : t + horizon]`.  The `W = n - lookback - horizon + 1`
    windows are ordered by target start and split train/val/test by
    cumulative fractions (`floor(W * f_train)` first windows train, and
    so on), so target regions never leak from test back into train even
    though later inputs may overlap earlier history.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("make_windows expects a 1-D series")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(values)
    w = n - lookback - horizon + 1
    if w < 1:
        raise ValueError(
            f"series of length {n} yields no windows for lookback {lookback} "
            f"and horizon {horizon}"
        )
    starts = np.arange(w)
    inputs = values[starts[:, None] + np.arange(lookback)[None, :]]
    targets = values[starts[:, None] + lookback + np.arange(horizon)[None, :]]
    n_train = int(np.floor(w * fractions[0]))
    n_trainval = int(np.floor(w * (fractions[0] + fractions[1])))
    return SplitWindows(
        train=WindowSet("train", inputs[:n_train], targets[:n_train]),
        val=WindowSet("val", inputs[n_train:n_trainval], targets[n_train:n_trainval]),
        test=WindowSet("test", inputs[n_trainval:], targets[n_trainval:]),
    )


def subsample_windows(ws: WindowSet, cap: int) -> WindowSet:
    """Evenly spaced deterministic subset of at most `cap` windows."""
    n = len(ws)
    if cap <= 0 or n <= cap:
        return ws
    idx = np.unique(np.linspace(0, n - 1, cap).astype(int))
    return WindowSet(ws.split, ws.inputs[idx], ws.targets[idx])


# ---------------------------------------------------------------------------
# synthetic data


SYNTH_PROFILES: dict[str, dict] = {
    # clean, strongly weekly-seasonal demand (cash-machine-like)
    "nn5-like": {
        "base_range": (15.0, 25.0),
        "amp_range": (4.0, 8.0),
        "trend_range": (-0.004, 0.004),
        "noise_sigma": 0.6,
        "dropout_rate": 0.0,
    },
    # noisier demand with whole-day dropouts (charging-station-like)
    "ev-like": {
        "base_range": (6.0, 14.0),
        "amp_range": (1.0, 4.0),
        "trend_range": (-0.004, 0.004),
        "noise_sigma": 2.0,
        "dropout_rate": 0.1,
    },
}

_SYNTH_START = dt.date(2017, 1, 1)
_WEEK = 7.0


def synth_dataset(
    num_clients: int,
    days: int,
    seed: int,
    profile: str = "nn5-like",
    overrides: dict | None = None,
) -> list[DailySeries]:
    """Generate per-client daily series from a weekly-seasonal model.

    Each client draws its own base level, seasonal amplitude, phase, and
    slow linear trend; Gaussian noise is added on top and dropout days
    are zeroed and flagged.  Values are clipped at zero (demand cannot be
    negative).  Bit-identical for a fixed (seed, num_clients, days).
    """
    if profile not in SYNTH_PROFILES:
        raise ValueError(f"unknown profile {profile!r}; have {sorted(SYNTH_PROFILES)}")
    if num_clients < 1 or days < 1:
        raise ValueError("num_clients and days must be >= 1")
    spec = dict(SYNTH_PROFILES[profile])
    if overrides:
        unknown = set(overrides) - set(spec)
        if unknown:
            raise ValueError(f"unknown synth overrides: {sorted(unknown)}")
        spec.update(overrides)
    out: list[DailySeries] = []
    t = np.arange(days, dtype=np.float64)
    for c in range(num_clients):
        rng = np.random.default_rng(np.random.SeedSequence((seed, c)))
        base = rng.uniform(*spec["base_range"])
        amp = rng.uniform(*spec["amp_range"])
        phase = rng.uniform(0.0, _WEEK)
        trend = rng.uniform(*spec["trend_range"])
        values = (
            base
            + amp * np.sin(2.0 * np.pi * (t + phase) / _WEEK)
            + trend * (t - days / 2.0)
        )
        if spec["noise_sigma"] > 0:
            values = values + rng.normal(0.0, spec["noise_sigma"], size=days)
        values = np.maximum(values, 0.0)
        missing = np.zeros(days, dtype=bool)
        if spec["dropout_rate"] > 0:
            missing = rng.random(days) < spec["dropout_rate"]
            values = np.where(missing, 0.0, values)
        out.append(
            DailySeries(
                client_id=f"client{c:03d}",
                start=_SYNTH_START,
                values=values,
                missing=missing,
            )
        )
    return out


# ---------------------------------------------------------------------------
# canonical series CSV


def save_series_csv(path, series_list: list[DailySeries]) -> None:
    """Canonical long-format daily series: client_id, date, value, missing."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["client_id", "date", "value", "missing"])
        for s in series_list:
            for i in range(len(s.values)):
                day = s.start + dt.timedelta(days=i)
                writer.writerow(
                    [s.client_id, day.isoformat(), repr(float(s.values[i])), int(s.missing[i])]
                )


def load_series_csv(path) -> list[DailySeries]:
    """Load the canonical long-format CSV written by `save_series_csv`."""
    rows: dict[str, list[tuple[dt.date, float, bool]]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        needed = {"client_id", "date", "value", "missing"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise IngestError(f"{path}: not a canonical series CSV")
        for row in reader:
            rows.setdefault(row["client_id"], []).append(
                (
                    dt.date.fromisoformat(row["date"]),
                    float(row["value"]),
                    bool(int(row["missing"])),
                )
            )
    out: list[DailySeries] = []
    for cid in sorted(rows):
        entries = sorted(rows[cid])
        start = entries[0][0]
        n = (entries[-1][0] - start).days + 1
        if n != len(entries):
            raise IngestError(f"{path}: client {cid} has non-contiguous days")
        out.append(
            DailySeries(
                client_id=cid,
                start=start,
                values=np.array([e[1] for e in entries]),
                missing=np.array([e[2] for e in entries], dtype=bool),
            )
        )
    return out


def load_daily_matrix(path) -> list[DailySeries]:
    """Load a wide daily CSV: first column a date, one column per client.

    Blank cells are zero-filled and flagged missing.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            return []
        body = list(reader)
    if len(header) < 2:
        raise IngestError(f"{path}: need a date column plus at least one client column")
    if not body:
        return []
    start = dt.date.fromisoformat(body[0][0].strip())
    values = np.zeros((len(body), len(header) - 1))
    missing = np.zeros_like(values, dtype=bool)
    for i, row in enumerate(body):
        day = dt.date.fromisoformat(row[0].strip())
        if (day - start).days != i:
            raise IngestError(f"{path}: rows must be contiguous daily dates")
        for j, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                missing[i, j] = True
            else:
                values[i, j] = float(cell)
    return [
        DailySeries(
            client_id=header[j + 1].strip() or f"col{j}",
            start=start,
            values=values[:, j],
            missing=missing[:, j],
        )
        for j in range(len(header) - 1)
    ]
