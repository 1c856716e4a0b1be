"""Single-asset episodic trading simulator: 1 BTC long/short/hold with intrabar SL/TP."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataError, EpisodeWindow, Features, MarketData

DEFAULT_SLTP = 0.001
TRACE_HEADER = ["step", "ts", "action", "side", "fill_price", "reward", "equity", "sltp"]


class Action(IntEnum):
    SHORT = 0
    LONG = 1
    HOLD = 2


class Side(IntEnum):
    SHORT = -1
    FLAT = 0
    LONG = 1


TARGET_SIDE = {Action.SHORT: Side.SHORT, Action.LONG: Side.LONG}


@dataclass(frozen=True)
class Position:
    side: Side = Side.FLAT
    entry_price: float = 0.0
    size: float = 1.0

    def __post_init__(self):
        if self.side != Side.FLAT and not self.entry_price > 0:
            raise ValueError("open position needs a positive entry price")

    def unrealized(self, price: float) -> float:
        return int(self.side) * (price - self.entry_price) * self.size if self.side else 0.0


FLAT = Position()


@dataclass(frozen=True)
class Fill:
    price: float
    realized: float
    reason: str  # "open", "close", "sl", "tp", "final"


def apply_sltp(position: Position, high: float, low: float, threshold: float = DEFAULT_SLTP) -> Fill | None:
    """Forced exit if the bar touches the stop-loss or take-profit level.

    Fills happen exactly at the level. When both levels are inside the bar the
    stop-loss is assumed to have been hit first.
    """
    if position.side == Side.FLAT or math.isinf(threshold):
        return None
    e = position.entry_price
    if position.side == Side.LONG:
        sl, tp = e * (1 - threshold), e * (1 + threshold)
        hit_sl, hit_tp = low <= sl, high >= tp
    else:
        sl, tp = e * (1 + threshold), e * (1 - threshold)
        hit_sl, hit_tp = high >= sl, low <= tp
    if hit_sl:
        return Fill(sl, position.unrealized(sl), "sl")
    if hit_tp:
        return Fill(tp, position.unrealized(tp), "tp")
    return None


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class TradingEnv:
    """Target-position environment over one :class:`EpisodeWindow`.

    The action chosen at cursor ``t`` executes at ``close[t]``; the cursor then
    moves to ``t + 1`` where SL/TP is checked against that bar's high/low
    before marking to ``close[t + 1]``. The episode ends on the window's last
    frame with a forced close.
    """

    def __init__(self, market: MarketData, features: Features, sltp: float = DEFAULT_SLTP,
                 fee_bps: float = 0.0, record_trace: bool = False) -> None:
        self.market = market
        self.features = features
        self.sltp = sltp
        self.fee_bps = fee_bps
        self.record_trace = record_trace
        self.emit_observations = True
        self.window: EpisodeWindow | None = None

    # state
    cursor: int
    position: Position
    realized: float
    equity: float
    initial_equity: float
    done: bool

    def reset(self, window: EpisodeWindow, lookback: int = 1, initial_equity: float | None = None,
              floor: int | None = None) -> np.ndarray:
        """``floor`` allows observations to be edge-padded instead of requiring a lookback margin."""
        if window.length < 2:
            raise DataError("episode window needs at least two frames")
        if window.stop > len(self.market):
            raise DataError(f"window [{window.start}, {window.stop}) exceeds {len(self.market)} frames")
        if floor is None:
            if window.start - lookback < 0:
                raise DataError(f"window start {window.start} leaves no lookback margin of {lookback}")
            floor = 0
        self.window = window
        self.lookback = lookback
        self.floor = floor
        self.cursor = window.start
        self.position = FLAT
        self.realized = 0.0
        self.initial_equity = float(self.market.close[window.start]) if initial_equity is None else float(initial_equity)
        self.equity = self.initial_equity
        self.done = False
        self.steps = 0
        self.trace: list[list] = []
        return self.observation()

    def observation(self) -> np.ndarray:
        return self.features.observe(self.cursor, self.lookback, self.floor)

    def _fee(self, price: float) -> float:
        return self.fee_bps * 1e-4 * price * self.position.size if self.fee_bps else 0.0

    def _close(self, price: float, reason: str) -> Fill:
        fill = Fill(price, self.position.unrealized(price) - self._fee(price), reason)
        self.realized += fill.realized
        self.position = FLAT
        return fill

    def _open(self, side: Side, price: float) -> Fill:
        self.position = Position(side, price)
        fee = self._fee(price)
        self.realized -= fee
        return Fill(price, -fee, "open")

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        action = Action(action)
        m = self.market
        t = self.cursor
        fills = []
        target = TARGET_SIDE.get(action, self.position.side)
        if target != self.position.side:
            price = float(m.close[t])
            if self.position.side != Side.FLAT:
                fills.append(self._close(price, "close"))
            fills.append(self._open(target, price))

        self.cursor = t = t + 1
        triggered = False
        if self.position.side != Side.FLAT:
            fill = apply_sltp(self.position, float(m.high[t]), float(m.low[t]), self.sltp)
            if fill is not None:
                fills.append(self._close(fill.price, fill.reason))
                triggered = True
        self.steps += 1
        self.done = t >= self.window.stop - 1
        if self.done and self.position.side != Side.FLAT:
            fills.append(self._close(float(m.close[t]), "final"))

        new_equity = self.initial_equity + self.realized + self.position.unrealized(float(m.close[t]))
        reward = new_equity - self.equity
        self.equity = new_equity
        if self.record_trace:
            self.trace.append([
                self.steps, int(m.ts[t]), action.name.lower(), self.position.side.name.lower(),
                repr(fills[-1].price) if fills else "", repr(reward), repr(new_equity), int(triggered),
            ])
        obs = self.observation() if self.emit_observations else None
        return StepOutcome(obs, reward, self.done, {"fills": fills, "sltp_triggered": triggered})

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            w.writerows(self.trace)


def run_actions(env: TradingEnv, window: EpisodeWindow, actions: Sequence[int], lookback: int = 1,
                initial_equity: float | None = None, floor: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Play a fixed action sequence; returns (rewards, equity curve including the start)."""
    env.reset(window, lookback, initial_equity, floor)
    n = window.length - 1
    if len(actions) != n:
        raise ValueError(f"expected {n} actions, got {len(actions)}")
    rewards = np.empty(n)
    equity = np.empty(n + 1)
    equity[0] = env.equity
    for i, a in enumerate(actions):
        out = env.step(int(a))
        rewards[i] = out.reward
        equity[i + 1] = env.equity
    return rewards, equity


def replay_equity(market: MarketData, window: EpisodeWindow, actions: Sequence[int], sltp: float = DEFAULT_SLTP,
                  fee_bps: float = 0.0, initial_equity: float | None = None) -> tuple[float, np.ndarray]:
    """Recompute an episode with a cash-and-holdings ledger.

    Independent of :class:`TradingEnv` bookkeeping: equity is ``cash + qty * close``.
    """
    start, stop = window.start, window.stop
    if len(actions) != window.length - 1:
        raise ValueError(f"expected {window.length - 1} actions, got {len(actions)}")
    cash = float(market.close[start]) if initial_equity is None else float(initial_equity)
    qty = 0.0
    entry = 0.0
    fee_rate = fee_bps * 1e-4

    def trade(delta: float, price: float):
        nonlocal cash, qty
        cash -= delta * price
        cash -= fee_rate * price * abs(delta)
        qty += delta

    equity_prev = cash
    rewards = []
    for k, a in enumerate(actions):
        t = start + k
        want = {0: -1.0, 1: 1.0}.get(int(a), qty)
        if want != qty:
            price = float(market.close[t])
            if qty != 0:
                trade(-qty, price)
            trade(want, price)
            entry = price
        t += 1
        if qty != 0 and not math.isinf(sltp):
            up, down = entry * (1 + sltp), entry * (1 - sltp)
            hi, lo = float(market.high[t]), float(market.low[t])
            if qty > 0:
                exit_price = down if lo <= down else (up if hi >= up else None)
            else:
                exit_price = up if hi >= up else (down if lo <= down else None)
            if exit_price is not None:
                trade(-qty, exit_price)
        if t == stop - 1 and qty != 0:
            trade(-qty, float(market.close[t]))
        equity = cash + qty * float(market.close[t])
        rewards.append(equity - equity_prev)
        equity_prev = equity
    return equity_prev, np.array(rewards)
