"""Return panels, study periods, sequence windows and labels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WINDOW = 240
SPLIT_LENGTH = 1000
STRIDE = 250
TRAIN_LENGTH = 750

BUY, SELL, NOTHING = 0, 1, 2
TERNARY_NAMES = ("buy", "sell", "nothing")


class PanelError(ValueError):
    """Raised for malformed panels or CSV input."""


class DegenerateSplitError(ValueError):
    """Raised when a study period has zero return dispersion."""


@dataclass(frozen=True)
class ReturnsPanel:
    dates: tuple
    tickers: tuple
    returns: np.ndarray
    membership: np.ndarray

    def __post_init__(self):
        returns = np.asarray(self.returns, dtype=np.float64)
        membership = np.asarray(self.membership, dtype=bool)
        if returns.shape != membership.shape:
            raise PanelError("returns and membership shapes differ")
        if returns.shape != (len(self.dates), len(self.tickers)):
            raise PanelError("returns shape does not match dates x tickers")
        if len(set(self.dates)) != len(self.dates):
            raise PanelError("duplicate date")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise PanelError("dates must be strictly increasing")
        if not np.all(np.isfinite(returns[membership])):
            raise PanelError("non-finite return on a member day")
        returns = np.where(membership, returns, np.nan)
        returns.setflags(write=False)
        membership.setflags(write=False)
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "membership", membership)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "tickers", tuple(self.tickers))

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)


def load_returns_csv(path) -> ReturnsPanel:
    """Read a ``date,<ticker>...`` CSV; empty cells mark non-member days."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PanelError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "date":
            raise PanelError(f"{path}: line 1: first column must be 'date'")
        tickers = [h.strip() for h in header[1:]]
        if len(set(tickers)) != len(tickers):
            raise PanelError(f"{path}: line 1: duplicate ticker column")
        rows = []
        seen = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise PanelError(
                    f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}")
            date = row[0].strip()
            if date in seen:
                raise PanelError(f"{path}: line {lineno}: duplicate date {date!r}")
            seen[date] = lineno
            values = []
            for cell in row[1:]:
                cell = cell.strip()
                if cell == "":
                    values.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise PanelError(
                        f"{path}: line {lineno}: non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise PanelError(f"{path}: line {lineno}: non-finite cell {cell!r}")
                values.append(v)
            rows.append((date, values))
    rows.sort(key=lambda r: r[0])
    dates = [r[0] for r in rows]
    returns = np.array([r[1] for r in rows], dtype=np.float64).reshape(len(rows), len(tickers))
    membership = ~np.isnan(returns)
    return ReturnsPanel(dates, tickers, returns, membership)


def write_returns_csv(panel: ReturnsPanel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date", *panel.tickers])
        for t, date in enumerate(panel.dates):
            cells = [repr(float(v)) if m else ""
                     for v, m in zip(panel.returns[t], panel.membership[t])]
            writer.writerow([date, *cells])


MAX_SIGNAL_CORR = 0.5


def _business_dates(n_days):
    start = np.datetime64("1990-01-01")
    days = np.busday_offset(start, np.arange(n_days), roll="forward")
    return [str(d) for d in days]


def generate_synthetic_panel(n_days: int, n_stocks: int, signal_strength: float,
                             seed: int, daily_vol: float = 0.02,
                             lookback: int = 10) -> ReturnsPanel:
    """Synthetic returns with a planted cross-sectional momentum signal.

    Each return is ``daily_vol * (sqrt(1 - rho**2) * eps + rho * m)`` where
    ``eps`` is i.i.d. standard normal and ``m`` is the cross-sectionally
    demeaned, unit-variance exponentially weighted sum of the previous
    ``lookback`` innovations of the same stock.  ``rho`` is the correlation
    between ``m`` and the next return: ``MAX_SIGNAL_CORR * signal_strength``.
    """
    if n_stocks < 21:
        raise PanelError("n_stocks must be at least 21 to form 10:10:rest labels")
    if n_days <= WINDOW:
        raise PanelError(f"n_days must exceed {WINDOW}")
    if not 0.0 <= signal_strength <= 1.0:
        raise PanelError("signal_strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_days + lookback, n_stocks))
    weights = 0.8 ** np.arange(lookback)
    weights /= np.sqrt(np.sum(weights ** 2))
    momentum = np.zeros((n_days, n_stocks))
    for lag, w in enumerate(weights, start=1):
        momentum += w * eps[lookback - lag:lookback - lag + n_days]
    momentum -= momentum.mean(axis=1, keepdims=True)
    momentum /= np.sqrt((n_stocks - 1) / n_stocks)
    rho = MAX_SIGNAL_CORR * float(signal_strength)
    returns = daily_vol * (math.sqrt(1.0 - rho ** 2) * eps[lookback:] + rho * momentum)
    tickers = [f"S{j:03d}" for j in range(n_stocks)]
    return ReturnsPanel(_business_dates(n_days), tickers, returns,
                        np.ones_like(returns, dtype=bool))


# ---------------------------------------------------------------------------
# study periods
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyPeriod:
    index: int
    start: int
    train_length: int
    test_length: int
    mu_train: float
    sigma_train: float

    @property
    def train_day_range(self) -> range:
        return range(self.start, self.start + self.train_length)

    @property
    def test_day_range(self) -> range:
        stop = self.start + self.train_length
        return range(stop, stop + self.test_length)


def generate_splits(panel: ReturnsPanel, split_length: int = SPLIT_LENGTH,
                    stride: int = STRIDE, train_length: int = TRAIN_LENGTH) -> list[StudyPeriod]:
    if not 0 < train_length < split_length:
        raise PanelError("train_length must lie strictly inside the split")
    n_days = panel.n_days
    if n_days < split_length:
        raise PanelError(f"panel has {n_days} days, need at least {split_length}")
    n_splits = (n_days - split_length) // stride + 1
    periods = []
    for k in range(n_splits):
        start = k * stride
        block = panel.returns[start:start + train_length]
        values = block[panel.membership[start:start + train_length]]
        if values.size < 2:
            raise DegenerateSplitError(f"split {k}: fewer than two training returns")
        mu = float(values.mean())
        sigma = float(values.std())
        if not sigma > 0:
            raise DegenerateSplitError(f"split {k}: zero training standard deviation")
        periods.append(StudyPeriod(k, start, train_length, split_length - train_length,
                                   mu, sigma))
    return periods


def standardize(value, period: StudyPeriod):
    if not period.sigma_train > 0:
        raise DegenerateSplitError(f"split {period.index}: sigma_train is zero")
    return (np.asarray(value, dtype=np.float64) - period.mu_train) / period.sigma_train


def destandardize(value, period: StudyPeriod):
    return np.asarray(value, dtype=np.float64) * period.sigma_train + period.mu_train


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def _members(panel, day):
    idx = np.flatnonzero(panel.membership[day])
    if idx.size == 0:
        raise PanelError(f"day {day}: no member stocks")
    return idx


def label_binary_median(panel: ReturnsPanel, day: int) -> dict:
    """1 where the return is strictly above the day's member median, else 0."""
    idx = _members(panel, day)
    r = panel.returns[day, idx]
    median = np.median(r)
    return {panel.tickers[j]: int(v > median) for j, v in zip(idx, r)}


def _ticker_rank(tickers):
    rank = np.empty(len(tickers), dtype=np.int64)
    rank[np.argsort(np.array(tickers, dtype=object), kind="stable")] = np.arange(len(tickers))
    return rank


def _ternary_codes(returns_row, ticker_rank, k):
    # ascending by (return, ticker): bottom k sell, top k buy
    order = np.lexsort((ticker_rank, returns_row))
    codes = np.full(len(returns_row), NOTHING, dtype=np.int64)
    codes[order[:k]] = SELL
    codes[order[len(order) - k:]] = BUY
    return codes


def label_ternary_topk(panel: ReturnsPanel, day: int, k: int = 10) -> dict:
    """Map ticker -> 'buy' / 'sell' / 'nothing' for one trading day."""
    idx = _members(panel, day)
    if idx.size < 2 * k + 1:
        raise PanelError(f"day {day}: {idx.size} members, need at least {2 * k + 1}")
    codes = _ternary_codes(panel.returns[day, idx], _ticker_rank(panel.tickers)[idx], k)
    return {panel.tickers[j]: TERNARY_NAMES[c] for j, c in zip(idx, codes)}


def label_arrays(panel: ReturnsPanel, k: int = 10):
    """Day x stock arrays of binary and ternary labels (-1 where undefined)."""
    binary = np.full(panel.returns.shape, -1, dtype=np.int64)
    ternary = np.full(panel.returns.shape, -1, dtype=np.int64)
    rank = _ticker_rank(panel.tickers)
    for day in range(panel.n_days):
        idx = np.flatnonzero(panel.membership[day])
        if idx.size == 0:
            continue
        r = panel.returns[day, idx]
        binary[day, idx] = (r > np.median(r)).astype(np.int64)
        if idx.size >= 2 * k + 1:
            ternary[day, idx] = _ternary_codes(r, rank[idx], k)
    return binary, ternary


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceSample:
    stock: str
    end_day: int
    window: np.ndarray
    binary_label: int | None
    ternary_label: str | None
    next_return: float


@dataclass
class SequenceSet:
    """Column-oriented collection of sequence samples.

    ``windows`` holds standardized returns; ``next_return`` is raw.  Label
    arrays use -1 for "absent".
    """

    stock: np.ndarray
    end_day: np.ndarray
    windows: np.ndarray
    binary_label: np.ndarray
    ternary_label: np.ndarray
    next_return: np.ndarray
    tickers: tuple = field(default=())

    def __len__(self):
        return len(self.end_day)

    def __getitem__(self, i) -> SequenceSample:
        b = int(self.binary_label[i])
        t = int(self.ternary_label[i])
        return SequenceSample(
            stock=self.tickers[self.stock[i]] if self.tickers else int(self.stock[i]),
            end_day=int(self.end_day[i]),
            window=self.windows[i],
            binary_label=b if b >= 0 else None,
            ternary_label=TERNARY_NAMES[t] if t >= 0 else None,
            next_return=float(self.next_return[i]),
        )

    def subset(self, mask_or_idx) -> "SequenceSet":
        return SequenceSet(self.stock[mask_or_idx], self.end_day[mask_or_idx],
                           self.windows[mask_or_idx], self.binary_label[mask_or_idx],
                           self.ternary_label[mask_or_idx], self.next_return[mask_or_idx],
                           self.tickers)


def build_sequences(panel: ReturnsPanel, period: StudyPeriod, region: str,
                    window: int = WINDOW, k: int = 10, labels=None) -> SequenceSet:
    """Sliding one-day windows whose target day t+1 falls inside ``region``.

    A sample needs membership on all window days and on t+1, and every window
    day must lie inside the study period.
    """
    if region == "train":
        targets = period.train_day_range
    elif region == "test":
        targets = period.test_day_range
    else:
        raise ValueError(f"region must be 'train' or 'test', got {region!r}")
    binary, ternary = labels if labels is not None else label_arrays(panel, k)

    member = panel.membership.astype(np.int64)
    csum = np.vstack([np.zeros((1, panel.n_stocks), dtype=np.int64), np.cumsum(member, axis=0)])
    z = standardize(np.where(panel.membership, panel.returns, 0.0), period)

    stocks, days = [], []
    first_end = period.start + window - 1
    for target in targets:
        t = target - 1
        if t < first_end:
            continue
        # window days t-window+1..t plus t+1 all members
        full = (csum[t + 2] - csum[t - window + 1]) == window + 1
        idx = np.flatnonzero(full)
        stocks.append(idx)
        days.append(np.full(idx.size, t, dtype=np.int64))
    if stocks:
        stock = np.concatenate(stocks)
        end_day = np.concatenate(days)
    else:
        stock = np.zeros(0, dtype=np.int64)
        end_day = np.zeros(0, dtype=np.int64)
    offsets = np.arange(-window + 1, 1)
    windows = z[end_day[:, None] + offsets[None, :], stock[:, None]] if stock.size else \
        np.zeros((0, window))
    return SequenceSet(
        stock=stock,
        end_day=end_day,
        windows=np.ascontiguousarray(windows),
        binary_label=binary[end_day + 1, stock],
        ternary_label=ternary[end_day + 1, stock],
        next_return=panel.returns[end_day + 1, stock].astype(np.float64),
        tickers=panel.tickers,
    )


def chronological_train_val_split(samples: SequenceSet, val_fraction: float = 0.2):
    """Hold out the latest ``ceil(val_fraction * n_days)`` distinct end-days."""
    if len(samples) == 0:
        raise ValueError("no samples to split")
    days = np.unique(samples.end_day)
    n_val = math.ceil(val_fraction * days.size - 1e-9) if val_fraction > 0 else 0
    if n_val == 0:
        return samples, samples.subset(np.zeros(len(samples), dtype=bool))
    cutoff = days[days.size - n_val]
    is_val = samples.end_day >= cutoff
    return samples.subset(~is_val), samples.subset(is_val)


def balanced_batch_stream(labels, batch_size: int = 128, seed: int = 0,
                          n_classes: int | None = None, rng=None):
    """Yield one epoch of index batches with classes drawn uniformly.

    Each draw picks a class uniformly, then a member of that class uniformly
    (with replacement).  An epoch has ``ceil(N / batch_size)`` batches.
    """
    labels = np.asarray(labels)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    members = [np.flatnonzero(labels == c) for c in range(n_classes)]
    absent = [c for c, m in enumerate(members) if m.size == 0]
    if absent:
        raise ValueError(f"class(es) {absent} absent from training labels")
    rng = np.random.default_rng(seed) if rng is None else rng
    n_batches = math.ceil(labels.size / batch_size)
    for _ in range(n_batches):
        cls = rng.integers(0, n_classes, size=batch_size)
        batch = np.empty(batch_size, dtype=np.int64)
        for c, m in enumerate(members):
            sel = cls == c
            batch[sel] = m[rng.integers(0, m.size, size=int(sel.sum()))]
        yield batch
