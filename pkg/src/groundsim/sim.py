"""Discrete-time microsimulator for one signalized four-approach intersection.

Car following is a Krauss-style safe-speed rule on a 1 s grid. Speeds are
chosen so that a vehicle can always stop behind its leader even if that leader
brakes at the emergency rate, which makes collisions impossible while
keeping every per-tick deceleration within ``e_decel``. Vehicles facing a red
or yellow signal treat the stop line as a stationary leader; a vehicle that
can no longer stop before the line within ``e_decel`` proceeds through it.

The hot loop is compiled with numba; :class:`Engine` wraps it with the signal
controller and bookkeeping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .scenario import (
    NUM_LANES,
    NUM_PHASES,
    Arrival,
    DynamicsProfile,
    FlowSpec,
    RoadNetwork,
)

WAITING_SPEED = 0.1
DT = 1.0

# Lanes are indexed approach * 3 + movement with approaches N, E, S, W and
# movements left, through, right. Right turns run with their approach's
# through movement.
PHASE_LANES = (
    (1, 2, 7, 8),    # NS through + right
    (0, 6),          # NS left
    (4, 5, 10, 11),  # EW through + right
    (3, 9),          # EW left
)
PHASE_NAMES = ("NS-through", "NS-left", "EW-through", "EW-left")

_PERMITTED = np.zeros((NUM_PHASES, NUM_LANES), dtype=np.bool_)
for _p, _lanes in enumerate(PHASE_LANES):
    _PERMITTED[_p, list(_lanes)] = True
_ALL_RED = np.zeros(NUM_LANES, dtype=np.bool_)


class PhaseError(ValueError):
    pass


@numba.njit(cache=True)
def stop_distance(v, b):
    """Distance covered while braking from ``v`` by ``b`` per tick, current tick included."""
    if v <= 0.0:
        return 0.0
    n = math.floor(v / b)
    return (n + 1.0) * v - b * n * (n + 1.0) / 2.0


@numba.njit(cache=True)
def safe_speed(dist, b):
    """Largest speed whose braking sequence (step ``b``) fits within ``dist``."""
    if dist <= 0.0:
        return 0.0
    n = math.floor((-1.0 + math.sqrt(1.0 + 8.0 * dist / b)) / 2.0)
    # guard the floor against rounding in the square root
    while n > 0 and b * n * (n + 1.0) / 2.0 > dist:
        n -= 1
    while b * (n + 1.0) * (n + 2.0) / 2.0 <= dist:
        n += 1
    return (dist + b * n * (n + 1.0) / 2.0) / (n + 1.0)


@numba.njit(cache=True)
def _advance(pos, spd, timer, release, vid, entered, waited, count,
             arr_time, arr_start, arr_end, arr_ptr,
             exit_id, exit_entered, exit_time, exit_wait, counters,
             permitted, clock, n_ticks,
             accel, decel, e_decel, startup_delay,
             lane_length, vlim, veh_len, min_gap,
             out_queue, out_innet, out_exited, out_speed_sum):
    """Advance ``n_ticks`` one-second ticks under a fixed permitted-lane mask.

    ``counters`` holds [next_id, n_exited]. Per-tick totals are written to the
    ``out_*`` arrays. Returns the new clock.
    """
    frac = startup_delay - math.floor(startup_delay)
    first_scale = 1.0 - frac if frac > 0.0 else 1.0
    n_lanes = pos.shape[0]
    for k in range(n_ticks):
        for lane in range(n_lanes):
            n = count[lane]
            go = permitted[lane]
            has_leader = False
            lx_old = 0.0
            lx_new = 0.0
            lv_new = 0.0
            n_out = 0
            for i in range(n):
                x = pos[lane, i]
                v = spd[lane, i]
                a = accel * first_scale if release[lane, i] else accel
                v_des = min(v + a * DT, vlim)
                v_hard = 1e300
                if has_leader:
                    g = lx_old - x - veh_len
                    v_hard = safe_speed(g + stop_distance(lv_new, e_decel), e_decel)
                    v_comf = safe_speed(max(0.0, g - min_gap) + stop_distance(lv_new, decel), decel)
                    v_des = min(v_des, v_comf)
                line_bound = False
                if not go:
                    dist = lane_length - x
                    v_line = safe_speed(dist, e_decel)
                    if v_line >= v - e_decel * DT - 1e-12:
                        line_bound = True
                        v_hard = min(v_hard, v_line)
                        v_des = min(v_des, safe_speed(dist, decel))
                v_new = max(v_des, v - e_decel * DT, 0.0)
                v_new = min(v_new, v_hard)
                if has_leader:
                    v_new = min(v_new, max(0.0, (lx_new - x - veh_len - 1e-10) / DT))
                if line_bound:
                    v_new = min(v_new, max(0.0, (lane_length - x) / DT))
                # startup delay for vehicles leaving standstill
                if v == 0.0 and v_new > 0.0:
                    if timer[lane, i] > 0.0:
                        timer[lane, i] = max(0.0, timer[lane, i] - DT)
                        release[lane, i] = timer[lane, i] == 0.0
                        v_new = 0.0
                    elif release[lane, i]:
                        release[lane, i] = False
                    elif startup_delay > 0.0:
                        timer[lane, i] = max(0.0, startup_delay - DT)
                        release[lane, i] = timer[lane, i] == 0.0
                        v_new = 0.0
                elif v_new == 0.0:
                    if not release[lane, i]:
                        timer[lane, i] = 0.0
                else:
                    release[lane, i] = False
                    timer[lane, i] = 0.0
                x_new = x + v_new * DT
                has_leader = True
                lx_old = x
                lx_new = x_new
                lv_new = v_new
                if x_new > lane_length:
                    e = counters[1]
                    exit_id[e] = vid[lane, i]
                    exit_entered[e] = entered[lane, i]
                    exit_time[e] = clock + DT
                    exit_wait[e] = waited[lane, i]
                    counters[1] = e + 1
                    n_out += 1
                else:
                    pos[lane, i] = x_new
                    spd[lane, i] = v_new
            if n_out > 0:
                # exits happen only at the front of the lane
                for j in range(n - n_out):
                    src = j + n_out
                    pos[lane, j] = pos[lane, src]
                    spd[lane, j] = spd[lane, src]
                    timer[lane, j] = timer[lane, src]
                    release[lane, j] = release[lane, src]
                    vid[lane, j] = vid[lane, src]
                    entered[lane, j] = entered[lane, src]
                    waited[lane, j] = waited[lane, src]
                n -= n_out
                count[lane] = n
            # insertion at the lane entry, at most one vehicle per tick
            p = arr_ptr[lane]
            if p < arr_end[lane] and arr_time[p] < clock + DT:
                if n == 0:
                    ok = True
                    v_ins = vlim
                else:
                    g = pos[lane, n - 1] - veh_len
                    ok = g >= min_gap
                    v_ins = min(vlim,
                                safe_speed(g + stop_distance(spd[lane, n - 1], e_decel), e_decel),
                                safe_speed(g - min_gap + stop_distance(spd[lane, n - 1], decel), decel),
                                max(0.0, g - 1e-10))
                if ok and n < pos.shape[1]:
                    pos[lane, n] = 0.0
                    spd[lane, n] = v_ins
                    timer[lane, n] = 0.0
                    release[lane, n] = False
                    vid[lane, n] = counters[0]
                    counters[0] += 1
                    entered[lane, n] = arr_time[p]
                    waited[lane, n] = 0.0
                    count[lane] = n + 1
                    arr_ptr[lane] = p + 1
        clock += DT
        q = 0
        tot = 0
        ssum = 0.0
        for lane in range(n_lanes):
            for i in range(count[lane]):
                tot += 1
                ssum += spd[lane, i]
                if spd[lane, i] < 0.1:
                    q += 1
                    waited[lane, i] += DT
        out_queue[k] = q
        out_innet[k] = tot
        out_exited[k] = counters[1]
        out_speed_sum[k] = ssum
    return clock


@dataclass
class Vehicle:
    id: int
    lane: int
    position: float
    speed: float
    entered_at: float
    startup_timer: float
    waiting: float


@dataclass
class SignalController:
    current_phase: int = 0
    yellow_remaining: int = 0
    pending_phase: int | None = None


@dataclass(frozen=True)
class ExitRecord:
    id: int
    entered_at: float
    exited_at: float
    waiting_seconds: float


class Engine:
    """One intersection world parameterized by a :class:`DynamicsProfile`.

    Parameters
    ----------
    profile : DynamicsProfile
    network : RoadNetwork
    arrivals : sequence of Arrival, or FlowSpec
        A FlowSpec is sampled with ``rng``.
    yellow_length : int
    rng : numpy Generator, optional
        Arrival sampling stream.
    """

    def __init__(self, profile: DynamicsProfile, network: RoadNetwork | None = None,
                 arrivals: Sequence[Arrival] | FlowSpec = (), yellow_length: int = 5,
                 rng: np.random.Generator | None = None):
        if profile.decel <= 0:
            raise ValueError("simulation needs decel > 0")
        self.profile = profile
        self.network = network or RoadNetwork()
        self.yellow_length = int(yellow_length)
        if isinstance(arrivals, FlowSpec):
            arrivals = arrivals.sample(rng if rng is not None else np.random.default_rng(0))
        self._load_arrivals(arrivals)
        cap = int(self.network.lane_length // self.network.vehicle_length) + 2
        shape = (NUM_LANES, cap)
        self._pos = np.zeros(shape)
        self._spd = np.zeros(shape)
        self._timer = np.zeros(shape)
        self._release = np.zeros(shape, dtype=np.bool_)
        self._vid = np.zeros(shape, dtype=np.int64)
        self._entered = np.zeros(shape)
        self._waited = np.zeros(shape)
        self._count = np.zeros(NUM_LANES, dtype=np.int64)
        m = len(self._arr_time) + NUM_LANES * cap
        self._exit_id = np.zeros(m, dtype=np.int64)
        self._exit_entered = np.zeros(m)
        self._exit_time = np.zeros(m)
        self._exit_wait = np.zeros(m)
        self._counters = np.zeros(2, dtype=np.int64)
        self.clock = 0.0
        self.controller = SignalController()
        self.trace: list[tuple[float, int, int, int, int]] = []
        self.delay_sum = 0.0
        self.delay_ticks = 0

    def _load_arrivals(self, arrivals: Sequence[Arrival]) -> None:
        order = sorted(arrivals, key=lambda a: (3 * a.approach + a.lane, a.time))
        lanes = np.array([3 * a.approach + a.lane for a in order], dtype=np.int64)
        self._arr_time = np.array([a.time for a in order], dtype=np.float64)
        self._arr_start = np.searchsorted(lanes, np.arange(NUM_LANES), side="left").astype(np.int64)
        self._arr_end = np.searchsorted(lanes, np.arange(NUM_LANES), side="right").astype(np.int64)
        self._arr_ptr = self._arr_start.copy()

    # --- signal -----------------------------------------------------------------

    def set_phase(self, phase: int) -> None:
        """Request ``phase``; a change goes through ``yellow_length`` seconds of all-red."""
        if not 0 <= int(phase) < NUM_PHASES:
            raise PhaseError(f"phase {phase} out of range 0..{NUM_PHASES - 1}")
        c = self.controller
        if c.yellow_remaining > 0:
            raise PhaseError("phase change during yellow")
        if phase == c.current_phase:
            return
        if self.yellow_length == 0:
            c.current_phase = int(phase)
            return
        c.yellow_remaining = self.yellow_length
        c.pending_phase = int(phase)

    @property
    def permitted(self) -> np.ndarray:
        c = self.controller
        return _ALL_RED if c.yellow_remaining > 0 else _PERMITTED[c.current_phase]

    # --- dynamics ---------------------------------------------------------------

    def step(self, n_ticks: int = 1) -> None:
        """Advance ``n_ticks`` seconds, splitting at the end of a yellow interval."""
        while n_ticks > 0:
            c = self.controller
            chunk = min(n_ticks, c.yellow_remaining) if c.yellow_remaining > 0 else n_ticks
            self._run(chunk, self.permitted)
            n_ticks -= chunk
            if c.yellow_remaining > 0:
                c.yellow_remaining -= chunk
                if c.yellow_remaining == 0:
                    c.current_phase = c.pending_phase
                    c.pending_phase = None

    def _run(self, n: int, permitted: np.ndarray) -> None:
        q = np.zeros(n, dtype=np.int64)
        innet = np.zeros(n, dtype=np.int64)
        ex = np.zeros(n, dtype=np.int64)
        ssum = np.zeros(n)
        p = self.profile
        net = self.network
        start = self.clock
        self.clock = _advance(
            self._pos, self._spd, self._timer, self._release, self._vid, self._entered, self._waited,
            self._count, self._arr_time, self._arr_start, self._arr_end, self._arr_ptr,
            self._exit_id, self._exit_entered, self._exit_time, self._exit_wait, self._counters,
            permitted, start, n,
            p.accel, p.decel, p.e_decel, p.startup_delay,
            net.lane_length, net.speed_limit, net.vehicle_length, net.min_gap,
            q, innet, ex, ssum)
        phase = self.controller.current_phase if self.controller.yellow_remaining == 0 else -1
        vlim = net.speed_limit
        for k in range(n):
            self.trace.append((start + k + 1, phase, int(q[k]), int(innet[k]), int(ex[k])))
            if innet[k] > 0:
                self.delay_sum += 1.0 - ssum[k] / innet[k] / vlim
                self.delay_ticks += 1

    # --- inspection -------------------------------------------------------------

    @property
    def spawned(self) -> int:
        return int(self._counters[0])

    @property
    def exited_count(self) -> int:
        return int(self._counters[1])

    @property
    def in_network(self) -> int:
        return int(self._count.sum())

    def lane_counts(self) -> np.ndarray:
        return self._count.copy()

    def lane_speeds(self, lane: int) -> np.ndarray:
        return self._spd[lane, : self._count[lane]].copy()

    def lane_positions(self, lane: int) -> np.ndarray:
        return self._pos[lane, : self._count[lane]].copy()

    def queue_length(self, lane: int) -> int:
        """Vehicles on ``lane`` slower than 0.1 m/s."""
        if not 0 <= lane < NUM_LANES:
            raise IndexError(f"lane {lane} out of range")
        return int(np.count_nonzero(self.lane_speeds(lane) < WAITING_SPEED))

    def queue_lengths(self) -> np.ndarray:
        return np.array([self.queue_length(lane) for lane in range(NUM_LANES)], dtype=np.int64)

    def vehicles(self, lane: int | None = None) -> list[Vehicle]:
        lanes = range(NUM_LANES) if lane is None else [lane]
        out = []
        for ln in lanes:
            for i in range(self._count[ln]):
                out.append(Vehicle(int(self._vid[ln, i]), ln, float(self._pos[ln, i]), float(self._spd[ln, i]),
                                   float(self._entered[ln, i]), float(self._timer[ln, i]), float(self._waited[ln, i])))
        return out

    def exits(self) -> list[ExitRecord]:
        n = self.exited_count
        return [ExitRecord(int(self._exit_id[i]), float(self._exit_entered[i]), float(self._exit_time[i]),
                           float(self._exit_wait[i])) for i in range(n)]

    def travel_times(self) -> np.ndarray:
        n = self.exited_count
        return self._exit_time[:n] - self._exit_entered[:n]

    def observe(self) -> np.ndarray:
        """12 lane counts followed by the one-hot phase (pending phase during yellow)."""
        obs = np.zeros(NUM_LANES + NUM_PHASES)
        obs[:NUM_LANES] = self._count
        c = self.controller
        obs[NUM_LANES + (c.pending_phase if c.yellow_remaining > 0 else c.current_phase)] = 1.0
        return obs

    def place_vehicle(self, lane: int, position: float, speed: float = 0.0, entered_at: float = 0.0,
                      startup_timer: float = 0.0) -> int:
        """Append a vehicle at the back of ``lane`` (test and scenario setup)."""
        n = int(self._count[lane])
        if n and self._pos[lane, n - 1] - position < self.network.vehicle_length:
            raise ValueError("vehicle overlaps the current last vehicle")
        if not 0 <= position <= self.network.lane_length or not 0 <= speed <= self.network.speed_limit:
            raise ValueError("position or speed out of range")
        self._pos[lane, n] = position
        self._spd[lane, n] = speed
        self._timer[lane, n] = startup_timer
        self._release[lane, n] = False
        self._vid[lane, n] = self._counters[0]
        self._counters[0] += 1
        self._entered[lane, n] = entered_at
        self._waited[lane, n] = 0.0
        self._count[lane] = n + 1
        return int(self._vid[lane, n])

    def snapshot(self) -> tuple:
        """Hashable copy of the full dynamic state (for determinism checks)."""
        c = self.controller
        arrays = (self._pos, self._spd, self._timer, self._release, self._vid, self._entered, self._waited,
                  self._count, self._arr_ptr, self._counters)
        return (self.clock, c.current_phase, c.yellow_remaining, c.pending_phase,
                tuple(a.tobytes() for a in arrays))

    def write_trace(self, path: str | Path) -> None:
        """One line per tick: ``clock,phase,total_queue,in_network,exited`` (phase -1 = yellow)."""
        lines = [f"{int(t)},{ph},{q},{n},{e}" for t, ph, q, n, e in self.trace]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
