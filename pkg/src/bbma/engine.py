"""Event-driven engine for the branching dynamics.

Each particle alternates exact killed steps with branch events: a step spans
min(exponential branch wait, next census boundary, horizon remainder), so
census snapshots carry zero discretization error.  Particles are processed
as a vectorized cohort — one phase advances every active particle by one
step — which keeps the per-event cost flat while populations grow.

Censuses record, per alive particle, everything the truncation windows
J^M_s = [0, M(1 + s^{3/4})) need after the fact: the interval's check
history (branch-event and census times with positions), the interval
maximum of position/(1 + time^{3/4}), and an ancestor index into the
previous census.  Truncated counts and martingales are therefore
recomputable for any window size (and any clock shift) from one set of
paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernel import sample_killed_steps_batch
from .model import IntervalSet, ModelParams, ground_state_h

# Branch-vs-census ties inside this window are processed as branch first.
TIE_EPS = 1e-15

__all__ = [
    "Census",
    "MartingaleTrace",
    "Particle",
    "ReplicateResult",
    "EventRecorder",
    "spawn_rng_stream",
    "run_replicate",
    "count",
    "truncated_count",
    "additive_martingale",
    "truncated_martingale",
    "truncation_flags_for",
    "shifted_truncated_count",
]

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit mix."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def spawn_rng_stream(master_seed: int, replicate_index: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate.

    The Philox key is a 64-bit mix of (master_seed, replicate_index), so
    streams are deterministic, platform-stable, and independent of the
    order in which replicates are executed.
    """
    key = _mix64((int(master_seed) + _GAMMA * (int(replicate_index) + 1)) & _MASK64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class Particle:
    """Snapshot record of one alive particle at a census."""

    id: int
    parent_id: int
    birth_time: float
    position: float
    truncation_ok: bool


@dataclass(frozen=True)
class Census:
    """Exact population snapshot at one census time."""

    time: float
    alive_positions: np.ndarray
    truncated_flags: np.ndarray
    absorbed_count: int
    extinct: bool
    ids: np.ndarray
    parent_ids: np.ndarray
    birth_times: np.ndarray
    ancestor_index: np.ndarray
    window_ratio: np.ndarray
    # Ancestral checkpoint rows for shifted-window queries; None when the
    # replicate was run with checkpoint_chains=False.
    chk_slot: np.ndarray | None
    chk_time: np.ndarray | None
    chk_pos: np.ndarray | None
    truncation_M: float | None

    def particles(self) -> list[Particle]:
        return [
            Particle(int(i), int(p), float(b), float(x), bool(f))
            for i, p, b, x, f in zip(
                self.ids, self.parent_ids, self.birth_times,
                self.alive_positions, self.truncated_flags,
            )
        ]


@dataclass(frozen=True)
class MartingaleTrace:
    """Per-census time series of (D_t, truncated D_t, |N_t|, |N_t(B)|)."""

    times: np.ndarray
    d: np.ndarray
    d_trunc: np.ndarray
    n_alive: np.ndarray
    set_counts: np.ndarray
    interval_sets: tuple[IntervalSet, ...]


@dataclass(frozen=True)
class ReplicateResult:
    censuses: list[Census]
    trace: MartingaleTrace
    status: str
    n_events: int
    counters: dict[str, int]
    absorption_times: np.ndarray | None = None


class EventRecorder:
    """Collects realized inter-branch waits, offspring counts, and event times.

    The wait of a branch event is the full elapsed time since the particle's
    birth (accumulated across census boundaries), so recorded waits are
    exact Exponential(r) draws up to end-of-run censoring; event times let a
    consumer undo that censoring exactly (birth = time - wait).
    """

    def __init__(self) -> None:
        self._waits: list[np.ndarray] = []
        self._offspring: list[np.ndarray] = []
        self._times: list[np.ndarray] = []

    def record(self, waits: np.ndarray, offspring: np.ndarray, times: np.ndarray) -> None:
        self._waits.append(np.asarray(waits, dtype=np.float64))
        self._offspring.append(np.asarray(offspring, dtype=np.int64))
        self._times.append(np.asarray(times, dtype=np.float64))

    @property
    def n_events(self) -> int:
        return sum(len(w) for w in self._waits)

    def waits(self) -> np.ndarray:
        return np.concatenate(self._waits) if self._waits else np.empty(0)

    def offspring(self) -> np.ndarray:
        return np.concatenate(self._offspring) if self._offspring else np.empty(0, np.int64)

    def times(self) -> np.ndarray:
        return np.concatenate(self._times) if self._times else np.empty(0)


class _Run:
    """Mutable state of one replicate; see run_replicate for the contract."""

    def __init__(
        self,
        params: ModelParams,
        x0: float,
        horizon: float,
        census_grid,
        truncation_M,
        rng,
        interval_sets,
        population_cap,
        bridge_correction,
        record_absorption_times,
        event_recorder,
        checkpoint_chains=True,
    ) -> None:
        self.params = params
        self.x0 = float(x0)
        self.horizon = float(horizon)
        self.grid = [float(t) for t in census_grid]
        self.M = None if truncation_M is None else float(truncation_M)
        self.rng = rng
        self.sets = tuple(interval_sets)
        self.cap = int(population_cap)
        self.bridge = bool(bridge_correction)
        self.record_hits = bool(record_absorption_times)
        self.recorder = event_recorder
        self.keep_chains = bool(checkpoint_chains)

        if not self.x0 > 0:
            raise ValueError("x0 must be positive")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("census grid must be strictly increasing")
        if self.grid and (self.grid[0] < 0 or self.grid[-1] > self.horizon + TIE_EPS):
            raise ValueError("census grid must lie within [0, horizon]")
        if self.bridge and self.M is None:
            raise ValueError("bridge_correction requires truncation_M")

        self.h_x0 = ground_state_h(self.x0, params)
        self.absorbed = 0
        self.created = 1
        self.branched = 0
        self.died_childless = 0
        self.n_events = 0
        self.next_id = 1
        self.status = "ok"
        self.hit_times: list[np.ndarray] = []

        # Active cohort (parallel arrays).
        self.pos = np.array([self.x0])
        self.pid = np.array([0], np.int64)
        self.parent = np.array([-1], np.int64)
        self.birth = np.array([0.0])
        self.accum = np.array([0.0])
        self.anc = np.array([-1], np.int64)
        self.prev_t = np.array([0.0])
        self.prev_p = np.array([self.x0])
        root_ok = True if self.M is None else bool(self.x0 < self.M)
        self.flag = np.array([root_ok])
        self.ratio = np.array([self.x0])  # check at time 0: pos/(1+0)
        # When the first census is strictly after t=0, the time-0 check must
        # surface in that census's checkpoint rows: pre-seed it as chain
        # entry 0 of the first interval.  A census at t=0 records it itself.
        first_at_zero = bool(self.grid) and self.grid[0] == 0.0
        self.chain = np.array([-1 if first_at_zero else 0], np.int64)

        self.censuses: list[Census] = []
        self.trace_rows: list[tuple] = []

    # -- truncation curve -------------------------------------------------

    def _curve(self, times: np.ndarray) -> np.ndarray:
        return self.M * (1.0 + times**0.75)

    # -- one inter-census interval ----------------------------------------

    def _advance(self, t_end: float) -> bool:
        """Advance every active particle to t_end; False on cap abort."""
        p = self.params
        rng = self.rng
        single_child = len(p.offspring.pmf) == 1
        support = p.offspring.support
        probs = p.offspring.probs

        parked: list[tuple] = []
        ct_t: list[np.ndarray] = []
        ct_p: list[np.ndarray] = []
        ct_prev: list[np.ndarray] = []
        ct_len = 0
        if self.keep_chains and self.pos.size and np.any(self.chain >= 0):
            # Pre-seeded root checkpoint (time-0 check before the first census).
            ct_t.append(np.array([0.0]))
            ct_p.append(np.array([self.x0]))
            ct_prev.append(np.array([-1], np.int64))
            ct_len = 1

        # Particles enter an interval synchronized at the previous census,
        # so every remaining-time starts at the full interval length.
        rem = np.full(self.pos.shape[0], self._rem0(t_end))

        while self.pos.size:
            n = self.pos.size
            if self.n_events + n > self.cap:
                self.status = "population_cap_exceeded"
                return False
            self.n_events += n

            E = rng.exponential(scale=1.0 / p.r, size=n)
            branch_first = E <= rem + TIE_EPS
            dt = np.minimum(E, rem)
            survived, newpos, hit = sample_killed_steps_batch(
                self.pos, dt, p, rng, materialize_hit_times=self.record_hits
            )

            n_abs = int((~survived).sum())
            self.absorbed += n_abs
            if self.record_hits and n_abs:
                start = t_end - rem
                self.hit_times.append((start + hit)[~survived])

            if not survived.any():
                self._clear_cohort()
                break
            sv = np.flatnonzero(survived)
            z = (t_end - rem + dt)[sv]
            ypos = newpos[sv]
            ratio_new = ypos / (1.0 + z**0.75)
            self.ratio[sv] = np.maximum(self.ratio[sv], ratio_new)
            if self.M is not None:
                ok = ratio_new < self.M
                if self.bridge:
                    u = rng.random(sv.size)
                    tau = z - self.prev_t[sv]
                    l0 = self._curve(self.prev_t[sv])
                    l1 = self._curve(z)
                    gap0 = l0 - self.prev_p[sv]
                    gap1 = l1 - ypos
                    eligible = (tau > 0) & (gap0 > 0) & (gap1 > 0)
                    with np.errstate(divide="ignore", over="ignore"):
                        pesc = np.exp(-2.0 * gap0 * gap1 / np.where(tau > 0, tau, 1.0))
                    ok &= ~(eligible & (u < pesc))
                self.flag[sv] &= ok
            self.prev_t[sv] = z
            self.prev_p[sv] = ypos

            park = sv[~branch_first[sv]]
            if park.size:
                parked.append((
                    newpos[park], self.flag[park], self.ratio[park],
                    self.pid[park], self.parent[park], self.birth[park],
                    self.anc[park], self.chain[park],
                    self.accum[park] + dt[park],
                    self.prev_t[park], self.prev_p[park],
                ))

            br = sv[branch_first[sv]]
            if br.size == 0:
                self._clear_cohort()
                break
            if single_child:
                m = np.full(br.size, int(support[0]), np.int64)
            else:
                m = rng.choice(support, size=br.size, p=probs)
            if self.recorder is not None:
                self.recorder.record(self.accum[br] + E[br], m, (t_end - rem + dt)[br])
            has_kids = m >= 1
            self.branched += int(has_kids.sum())
            self.died_childless += int((~has_kids).sum())
            bi = br[has_kids]
            if bi.size == 0:
                self._clear_cohort()
                break
            counts = m[has_kids].astype(np.int64)
            zb = (t_end - rem + dt)[bi]
            if self.keep_chains:
                ct_t.append(zb)
                ct_p.append(newpos[bi])
                ct_prev.append(self.chain[bi])
                new_chain = ct_len + np.arange(bi.size, dtype=np.int64)
                ct_len += bi.size

            total = int(counts.sum())
            rep = np.repeat(np.arange(bi.size), counts)
            child_rem = np.repeat(rem[bi] - dt[bi], counts)
            self.pos = np.repeat(newpos[bi], counts)
            self.flag = np.repeat(self.flag[bi], counts)
            self.ratio = np.repeat(self.ratio[bi], counts)
            self.parent = np.repeat(self.pid[bi], counts)
            self.pid = self.next_id + np.arange(total, dtype=np.int64)
            self.next_id += total
            self.created += total
            self.birth = np.repeat(zb, counts)
            self.anc = np.repeat(self.anc[bi], counts)
            self.chain = new_chain[rep] if self.keep_chains else np.full(total, -1, np.int64)
            self.accum = np.zeros(total)
            self.prev_t = np.repeat(zb, counts)
            self.prev_p = self.pos.copy()

            at_boundary = child_rem <= 0.0
            if at_boundary.any():
                k = np.flatnonzero(at_boundary)
                parked.append((
                    self.pos[k], self.flag[k], self.ratio[k],
                    self.pid[k], self.parent[k], self.birth[k],
                    self.anc[k], self.chain[k], self.accum[k],
                    self.prev_t[k], self.prev_p[k],
                ))
            keep = ~at_boundary
            self._filter_cohort(keep)
            rem = child_rem[keep]

        self._parked = parked
        self._ct = (
            np.concatenate(ct_t) if ct_t else np.empty(0),
            np.concatenate(ct_p) if ct_p else np.empty(0),
            np.concatenate(ct_prev) if ct_prev else np.empty(0, np.int64),
        )
        return True

    def _rem0(self, t_end: float) -> float:
        return t_end - self._t_now

    def _clear_cohort(self) -> None:
        self._filter_cohort(np.zeros(self.pos.size, dtype=bool))

    def _filter_cohort(self, keep: np.ndarray) -> None:
        for name in ("pos", "flag", "ratio", "pid", "parent", "birth",
                     "anc", "chain", "accum", "prev_t", "prev_p"):
            setattr(self, name, getattr(self, name)[keep])

    # -- census assembly ---------------------------------------------------

    def _gather_parked(self) -> tuple:
        if not self._parked:
            e = np.empty(0)
            ei = np.empty(0, np.int64)
            eb = np.empty(0, dtype=bool)
            return (e, eb, e, ei, ei, e, ei, ei, e, e, e)
        return tuple(np.concatenate(c) for c in zip(*self._parked))

    def _emit_census(self, t_c: float, initial: bool = False) -> None:
        if initial:
            pos, flg, rat = self.pos, self.flag, self.ratio
            pid, par, bth = self.pid, self.parent, self.birth
            anc = self.anc
            chain = np.full(pos.size, -1, np.int64)
            ct_t = ct_p = np.empty(0)
            ct_prev = np.empty(0, np.int64)
        else:
            (pos, flg, rat, pid, par, bth, anc, chain,
             accum, prv_t, prv_p) = self._gather_parked()
            ct_t, ct_p, ct_prev = self._ct

        nslots = pos.size
        slots = np.arange(nslots, dtype=np.int64)
        if self.keep_chains:
            chk_slot = [slots]
            chk_time = [np.full(nslots, t_c)]
            chk_pos = [pos]
            ci = chain.copy()
            live = ci >= 0
            while live.any():
                idx = ci[live]
                chk_slot.append(slots[live])
                chk_time.append(ct_t[idx])
                chk_pos.append(ct_p[idx])
                ci[live] = ct_prev[idx]
                live = ci >= 0

        census = Census(
            time=t_c,
            alive_positions=pos,
            truncated_flags=flg.astype(bool),
            absorbed_count=self.absorbed,
            extinct=bool(nslots == 0),
            ids=pid,
            parent_ids=par,
            birth_times=bth,
            ancestor_index=anc,
            window_ratio=rat,
            chk_slot=np.concatenate(chk_slot) if self.keep_chains else None,
            chk_time=np.concatenate(chk_time) if self.keep_chains else None,
            chk_pos=np.concatenate(chk_pos) if self.keep_chains else None,
            truncation_M=self.M,
        )
        self.censuses.append(census)
        self._append_trace(census)

        if not initial:
            # Re-seed the cohort for the next interval.
            self.pos, self.flag = pos, flg
            self.pid, self.parent, self.birth = pid, par, bth
            self.accum = accum
            self.prev_t, self.prev_p = prv_t, prv_p
            self.anc = slots.copy()
            self.ratio = np.zeros(nslots)
            self.chain = np.full(nslots, -1, np.int64)
        else:
            self.anc = np.zeros(1, np.int64) if nslots else np.empty(0, np.int64)
            self.ratio = np.zeros(nslots)
            self.chain = np.full(nslots, -1, np.int64)

    def _append_trace(self, census: Census) -> None:
        p = self.params
        decay = math.exp(-p.growth_exponent * census.time)
        hvals = ground_state_h(census.alive_positions, p)
        d = float(np.sum(hvals)) * decay / self.h_x0
        d_tr = float(np.sum(hvals, where=census.truncated_flags)) * decay / self.h_x0
        counts = tuple(int(B.indicator(census.alive_positions).sum()) for B in self.sets)
        self.trace_rows.append((census.time, d, d_tr, census.alive_positions.size, counts))

    def _emit_empty_census(self, t_c: float) -> None:
        e = np.empty(0)
        ei = np.empty(0, np.int64)
        census = Census(
            time=t_c, alive_positions=e, truncated_flags=e.astype(bool),
            absorbed_count=self.absorbed, extinct=True, ids=ei, parent_ids=ei,
            birth_times=e, ancestor_index=ei, window_ratio=e,
            chk_slot=ei if self.keep_chains else None,
            chk_time=e if self.keep_chains else None,
            chk_pos=e if self.keep_chains else None,
            truncation_M=self.M,
        )
        self.censuses.append(census)
        self._append_trace(census)

    # -- driver -------------------------------------------------------------

    def run(self) -> ReplicateResult:
        self._t_now = 0.0
        grid = list(self.grid)
        if grid and grid[0] == 0.0:
            self._emit_census(0.0, initial=True)
            grid = grid[1:]
        boundaries = grid + ([] if grid and grid[-1] >= self.horizon - TIE_EPS else [self.horizon])
        n_census = len(grid)
        for i, t_end in enumerate(boundaries):
            emit = i < n_census
            if self.pos.size == 0:
                if emit:
                    self._emit_empty_census(t_end)
                self._t_now = t_end
                continue
            ok = self._advance(t_end)
            if not ok:
                break
            if emit:
                self._emit_census(t_end)
            else:
                # Horizon tail beyond the last census: park the survivors
                # back into the cohort without a census.
                (self.pos, self.flag, self.ratio, self.pid, self.parent,
                 self.birth, self.anc, self.chain, self.accum,
                 self.prev_t, self.prev_p) = self._gather_parked()
            self._t_now = t_end

        trace = MartingaleTrace(
            times=np.array([row[0] for row in self.trace_rows]),
            d=np.array([row[1] for row in self.trace_rows]),
            d_trunc=np.array([row[2] for row in self.trace_rows]),
            n_alive=np.array([row[3] for row in self.trace_rows], np.int64),
            set_counts=np.array([row[4] for row in self.trace_rows], np.int64).reshape(
                len(self.trace_rows), len(self.sets)
            ),
            interval_sets=self.sets,
        )
        counters = {
            "created": self.created,
            "absorbed": self.absorbed,
            "died_childless": self.died_childless,
            "branched": self.branched,
            "alive_final": int(self.censuses[-1].alive_positions.size) if self.censuses else int(self.pos.size),
        }
        return ReplicateResult(
            censuses=self.censuses,
            trace=trace,
            status=self.status,
            n_events=self.n_events,
            counters=counters,
            absorption_times=(np.concatenate(self.hit_times) if self.hit_times else np.empty(0))
            if self.record_hits else None,
        )


def run_replicate(
    params: ModelParams,
    x0: float,
    horizon: float,
    census_grid,
    truncation_M: float | None = None,
    rng: np.random.Generator | None = None,
    *,
    interval_sets=(),
    population_cap: int = 10_000_000,
    bridge_correction: bool = False,
    record_absorption_times: bool = False,
    event_recorder: EventRecorder | None = None,
    checkpoint_chains: bool = True,
) -> ReplicateResult:
    """Simulate one replicate started from a single particle at x0.

    Censuses are taken at the times in census_grid (sorted, within
    [0, horizon]).  truncation_M switches on run-time window flags for
    J^M_s = [0, M(1+s^{3/4})), checked at every event and census time;
    bridge_correction additionally marks a particle as escaped with the
    exact Brownian-bridge crossing probability of the chord between
    consecutive check points (the chord lies below the concave boundary,
    so corrected counts are a stochastic lower bound).  Exceeding
    population_cap cumulative particle-events aborts the replicate with
    status "population_cap_exceeded" and partial censuses.

    checkpoint_chains=False drops the per-census ancestral checkpoint
    tables, whose size is O(alive particles x branch generations) and
    dominates memory for large populations.  Stored window flags,
    window_ratio, and s=0 flag recomputation are unaffected; only
    shifted-window (s > 0) queries need the tables.  Draws identical
    randomness either way.
    """
    if rng is None:
        raise ValueError("run_replicate requires an rng; see spawn_rng_stream")
    return _Run(
        params, x0, horizon, census_grid, truncation_M, rng, interval_sets,
        population_cap, bridge_correction, record_absorption_times, event_recorder,
        checkpoint_chains,
    ).run()


# -- census reductions -----------------------------------------------------


def count(census: Census, B: IntervalSet) -> int:
    """|N_t(B)|: alive particles with position in B."""
    return int(B.indicator(census.alive_positions).sum())


def truncated_count(census: Census, B: IntervalSet) -> int:
    """Alive particles in B whose whole path stayed inside the run's window."""
    return int((B.indicator(census.alive_positions) & census.truncated_flags).sum())


def additive_martingale(census: Census, params: ModelParams, x0: float) -> float:
    """D_t = e^{-(r(mu1-1)-lambda) t} sum_u h(u_t) / h(x0); 0 when extinct."""
    hvals = ground_state_h(census.alive_positions, params)
    return float(np.sum(hvals)) * math.exp(-params.growth_exponent * census.time) / ground_state_h(x0, params)


def truncated_martingale(
    census: Census,
    params: ModelParams,
    x0: float,
    M: float | None = None,
    flags: np.ndarray | None = None,
) -> float:
    """Truncated martingale: the D_t sum restricted to in-window particles.

    With no explicit flags, M must match the window the replicate was run
    with (or be None); arbitrary windows are recomputed from the census
    sequence via truncation_flags_for.
    """
    if flags is None:
        if M is not None and census.truncation_M is not None and M != census.truncation_M:
            raise ValueError("census flags were computed for a different M; pass flags from truncation_flags_for")
        if M is not None and census.truncation_M is None:
            raise ValueError("replicate ran without a window; pass flags from truncation_flags_for")
        flags = census.truncated_flags
    hvals = ground_state_h(census.alive_positions, params)
    total = float(np.sum(hvals, where=np.asarray(flags, dtype=bool)))
    return total * math.exp(-params.growth_exponent * census.time) / ground_state_h(x0, params)


def truncation_flags_for(censuses: list[Census], M: float, s: float = 0.0) -> list[np.ndarray]:
    """Recompute hereditary window flags for any (M, s) from stored censuses.

    Checks exactly the run-time check set (every event and census time), so
    s=0 with the run's M reproduces the stored flags bit for bit.  The shift
    s slides the window clock: position < M(1 + (s + time)^{3/4}).
    """
    flags: list[np.ndarray] = []
    prev: np.ndarray | None = None
    for cen in censuses:
        n = cen.alive_positions.size
        if s == 0.0:
            ok = cen.window_ratio < M
        else:
            if cen.chk_slot is None:
                raise ValueError(
                    "shifted-window flags need checkpoint chains; "
                    "rerun with checkpoint_chains=True"
                )
            ok = np.ones(n, dtype=bool)
            good = cen.chk_pos < M * (1.0 + (s + cen.chk_time) ** 0.75)
            np.logical_and.at(ok, cen.chk_slot, good)
        if prev is not None and n:
            anc = cen.ancestor_index
            inherited = np.where(anc >= 0, prev[np.maximum(anc, 0)] if prev.size else True, True)
            ok = ok & inherited
        flags.append(ok)
        prev = ok
    return flags


def shifted_truncated_count(censuses: list[Census], M: float, s: float, B: IntervalSet) -> int:
    """Alive particles in B at the last census whose path stayed in the
    s-shifted window at every checked time."""
    flags = truncation_flags_for(censuses, M, s)
    final = censuses[-1]
    return int((flags[-1] & B.indicator(final.alive_positions)).sum())
