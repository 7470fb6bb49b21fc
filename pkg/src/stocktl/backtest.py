"""Daily k long / k short portfolio, transaction costs and performance metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

TRADING_DAYS = 252
DEFAULT_COST = 0.0005  # 5 bps per unit of traded notional

REPORT_METRICS = ("Ann ret", "Ann vol", "IR", "D. Risk", "DIR", "Acc", "Macro-F1")


@dataclass
class DayPortfolio:
    day: int
    long: tuple
    short: tuple
    gross_return: float
    turnover: float = 0.0
    cost: float = 0.0
    net_return: float = math.nan
    shrunk: bool = False


@dataclass
class PortfolioLedger:
    days: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def gross(self) -> np.ndarray:
        return np.array([d.gross_return for d in self.days])

    @property
    def net(self) -> np.ndarray:
        return np.array([d.net_return for d in self.days])

    @property
    def turnover(self) -> np.ndarray:
        return np.array([d.turnover for d in self.days])


def select_portfolio(tickers, p_buy, p_sell, k: int = 10):
    """Top-k by ``p_buy`` go long, top-k by ``p_sell`` go short, legs disjoint.

    Both ranked lists are walked in lock step; a name goes to whichever leg
    reaches it first (the better rank, long on equal rank) and is skipped by
    the other.  Ranks tie-break on ticker.  With fewer than ``2k`` names both
    legs shrink to ``M // 2``.  Returns ``(long, short, shrunk)``.
    """
    tickers = list(tickers)
    p_buy = np.asarray(p_buy, dtype=np.float64)
    p_sell = np.asarray(p_sell, dtype=np.float64)
    m = len(tickers)
    shrunk = m < 2 * k
    if shrunk:
        k = m // 2
    names = np.array(tickers, dtype=object)
    buy_order = np.lexsort((names, -p_buy))
    sell_order = np.lexsort((names, -p_sell))
    taken = set()
    long, short = [], []
    for r in range(m):
        if len(long) == k and len(short) == k:
            break
        b = int(buy_order[r])
        if len(long) < k and b not in taken:
            long.append(b)
            taken.add(b)
        s = int(sell_order[r])
        if len(short) < k and s not in taken:
            short.append(s)
            taken.add(s)
    return tuple(tickers[i] for i in long), tuple(tickers[i] for i in short), shrunk


def daily_portfolio_return(long_returns, short_returns) -> float:
    long_returns = np.asarray(long_returns, dtype=np.float64)
    short_returns = np.asarray(short_returns, dtype=np.float64)
    if long_returns.size == 0 or short_returns.size == 0:
        raise ValueError("both legs must be non-empty")
    return float(long_returns.mean() - short_returns.mean())


def _weights(day: DayPortfolio):
    w = {}
    for t in day.long:
        w[t] = w.get(t, 0.0) + 1.0 / len(day.long)
    for t in day.short:
        w[t] = w.get(t, 0.0) - 1.0 / len(day.short)
    return w


def apply_costs(ledger: PortfolioLedger, cost_per_trade: float = DEFAULT_COST) -> PortfolioLedger:
    """Charge ``cost_per_trade`` per unit of traded notional, in day order.

    Turnover is ``sum |w_t - w_{t-1}|`` over names with equal-weight legs of
    unit notional; the day before the first is flat.
    """
    prev = {}
    for day in ledger.days:
        w = _weights(day)
        names = set(w) | set(prev)
        day.turnover = float(sum(abs(w.get(n, 0.0) - prev.get(n, 0.0)) for n in sorted(names)))
        day.cost = cost_per_trade * day.turnover
        day.net_return = day.gross_return - day.cost
        prev = w
    return ledger


def build_ledger(predictions, k: int = 10, cost_per_trade: float = DEFAULT_COST) -> PortfolioLedger:
    """Run the daily long-short rule over a prediction table.

    ``predictions`` maps column name to array: ``day``, ``ticker``, ``p_buy``,
    ``p_sell``, ``next_return``.
    """
    day_col = np.asarray(predictions["day"])
    tick_col = np.asarray(predictions["ticker"], dtype=object)
    p_buy = np.asarray(predictions["p_buy"], dtype=np.float64)
    p_sell = np.asarray(predictions["p_sell"], dtype=np.float64)
    nxt = np.asarray(predictions["next_return"], dtype=np.float64)
    ledger = PortfolioLedger()
    for day in np.unique(day_col):
        sel = np.flatnonzero(day_col == day)
        tickers = list(tick_col[sel])
        long, short, shrunk = select_portfolio(tickers, p_buy[sel], p_sell[sel], k)
        if shrunk:
            ledger.warnings.append(
                f"day {day}: {len(tickers)} candidates < {2 * k}, legs shrunk to {len(long)}")
        if not long:
            continue
        lookup = dict(zip(tickers, nxt[sel]))
        gross = daily_portfolio_return([lookup[t] for t in long], [lookup[t] for t in short])
        day = day.item() if hasattr(day, "item") else day
        ledger.days.append(DayPortfolio(day, long, short, gross, shrunk=shrunk))
    return apply_costs(ledger, cost_per_trade)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def information_ratio(returns):
    """``(ann_return, ann_vol, IR)``; IR is NaN (undefined) when vol is zero."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("information ratio needs at least two observations")
    ann_return = float(r.mean() * TRADING_DAYS)
    ann_vol = float(r.std(ddof=1) * math.sqrt(TRADING_DAYS))
    ir = ann_return / ann_vol if ann_vol > 0 else math.nan
    return ann_return, ann_vol, ir


def downside_information_ratio(returns):
    """``(downside_risk, DIR)`` with full-sample semideviation about zero."""
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ValueError("downside information ratio needs observations")
    downside = float(math.sqrt(np.mean(np.minimum(r, 0.0) ** 2)) * math.sqrt(TRADING_DAYS))
    ann_return = float(r.mean() * TRADING_DAYS)
    dir_ = ann_return / downside if downside > 0 else math.nan
    return downside, dir_


def classification_metrics(predicted, truth):
    """``(accuracy, macro_f1)`` as fractions.

    Classes absent from both ``predicted`` and ``truth`` do not enter the
    macro average.  Per-class F1 values are averaged as exact fractions of
    the integer counts, so the result is the correctly rounded macro-F1.
    """
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.size == 0 or predicted.shape != truth.shape:
        raise ValueError("predictions and labels must be non-empty and aligned")
    accuracy = float(np.mean(predicted == truth))
    f1s = []
    for c in np.union1d(np.unique(predicted), np.unique(truth)):
        tp = int(np.sum((predicted == c) & (truth == c)))
        fp = int(np.sum((predicted == c) & (truth != c)))
        fn = int(np.sum((predicted != c) & (truth == c)))
        denom = 2 * tp + fp + fn
        f1s.append(Fraction(2 * tp, denom) if denom else Fraction(0))
    return accuracy, float(sum(f1s) / len(f1s))


@dataclass
class MetricsReport:
    ann_return: float
    ann_vol: float
    information_ratio: float
    downside_risk: float
    downside_ir: float
    accuracy: float | None = None
    accuracy_std: float | None = None
    macro_f1: float | None = None
    macro_f1_std: float | None = None
    n_days: int = 0

    def row(self) -> dict:
        """Table columns in percent (returns, vol, risk, accuracy, F1)."""
        def pct(v):
            return None if v is None or not math.isfinite(v) else 100.0 * v

        def num(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "Ann ret": pct(self.ann_return),
            "Ann vol": pct(self.ann_vol),
            "IR": num(self.information_ratio),
            "D. Risk": pct(self.downside_risk),
            "DIR": num(self.downside_ir),
            "Acc": pct(self.accuracy),
            "Acc std": pct(self.accuracy_std),
            "Macro-F1": pct(self.macro_f1),
            "Macro-F1 std": pct(self.macro_f1_std),
        }


def portfolio_metrics(net_returns) -> MetricsReport:
    ann_return, ann_vol, ir = information_ratio(net_returns)
    downside, dir_ = downside_information_ratio(net_returns)
    return MetricsReport(ann_return, ann_vol, ir, downside, dir_, n_days=len(net_returns))


@dataclass
class SplitResult:
    split: int
    net_returns: np.ndarray
    accuracy: float | None = None
    macro_f1: float | None = None


def aggregate_splits(results) -> MetricsReport:
    """Portfolio metrics on the concatenated net series; classification mean/std."""
    results = list(results)
    if not results:
        raise ValueError("no split results to aggregate")
    series = np.concatenate([np.asarray(r.net_returns, dtype=np.float64) for r in results])
    report = portfolio_metrics(series)
    accs = [r.accuracy for r in results if r.accuracy is not None]
    f1s = [r.macro_f1 for r in results if r.macro_f1 is not None]
    if accs:
        report.accuracy = float(np.mean(accs))
        report.accuracy_std = float(np.std(accs))
    if f1s:
        report.macro_f1 = float(np.mean(f1s))
        report.macro_f1_std = float(np.std(f1s))
    return report


def average_reports(reports) -> MetricsReport:
    """Field-wise mean of several reports (used for seed averaging)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")

    def mean(attr):
        vals = [getattr(r, attr) for r in reports]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    return MetricsReport(
        mean("ann_return"), mean("ann_vol"), mean("information_ratio"),
        mean("downside_risk"), mean("downside_ir"), mean("accuracy"),
        mean("accuracy_std"), mean("macro_f1"), mean("macro_f1_std"),
        n_days=reports[0].n_days)
