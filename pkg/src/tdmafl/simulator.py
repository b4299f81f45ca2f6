"""Slot-accurate event simulation of asynchronous federated rounds over TDMA.

The simulator advances an integer slot clock through training rounds. Each
round waits until at least S devices hold a finished local update, picks the
S transmitters whose updates are oldest (lowest start round, then earliest
compute completion, then lowest device index), occupies the channel with S
uploads of r slots plus one r-slot broadcast, applies the global update, and
hands the fresh model to its recipients.

With ``intentional_delay == 0`` the broadcast of round k goes back to round
k's own transmitters. With a positive delay alpha it goes to the transmitters
of round k - alpha; for k < alpha those recipient sets are the pre-assigned
warm-up groups (devices are split into G contiguous index groups, groups
1..G-alpha start computing at slot 0, and group G-alpha+j first receives a
model at the end of round j-1).

A new round is launched while the consumed-slot clock is still within the
horizon (clock <= T); the final launched round runs to completion. This is
the accounting under which the round counts of long reference runs are
reproduced exactly.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigError
from .timing import SystemConfig

EVENT_KINDS = ("compute_start", "compute_done", "uplink", "downlink")
SERVER_ID = 0  # device_id used for the downlink broadcast


class TimelineEvent(NamedTuple):
    """One slot-stamped action. Transfers occupy [slot, slot + r - 1]."""

    slot: int
    kind: str
    device_id: int
    round_index: int


class StalenessRecord(NamedTuple):
    round_index: int
    device_id: int
    staleness: int


@dataclass
class DeviceState:
    """Per-device bookkeeping between events.

    ``compute_done_slot`` is the last slot of the device's current or most
    recent local computation (None before it ever computes). The pending
    update is non-None exactly while a finished update waits to be uploaded.
    """

    device_id: int
    last_model_round: int = 0
    compute_done_slot: Optional[int] = None
    pending_update: Optional[np.ndarray] = None
    awaiting_model_until_round: Optional[int] = None


class RoundLearner(Protocol):
    """Numerical plug-in driven by the scheduler."""

    def initial_model(self) -> np.ndarray: ...

    def local_update(self, device_id: int, model: np.ndarray, round_index: int) -> np.ndarray: ...

    def apply_round(self, model: np.ndarray, updates: Sequence[np.ndarray]) -> np.ndarray: ...

    def round_metrics(self, model: np.ndarray) -> tuple[float, float]:
        """Return (loss, squared gradient norm) of the global objective."""
        ...


@dataclass
class RunMetrics:
    """Per-round measurements plus summary accessors.

    ``loss`` and ``grad_norm_sq`` are NaN for rounds where evaluation was
    skipped (timing-only runs or decimated metrics).
    """

    rounds: list[int] = field(default_factory=list)
    slots: list[int] = field(default_factory=list)
    staleness: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm_sq: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rounds)

    def avg_grad_norm_sq(self) -> float:
        """Running average of the evaluated squared gradient norms."""
        vals = np.asarray(self.grad_norm_sq, dtype=float)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")


@dataclass
class SimResult:
    config: SystemConfig
    events: list[TimelineEvent]
    staleness_records: list[StalenessRecord]
    metrics: RunMetrics
    completed_rounds: int
    launch_clocks: list[int]
    downlink_end_slots: list[int]
    transmitter_sets: list[tuple[int, ...]]
    final_model: Optional[np.ndarray] = None
    model_history: Optional[list[np.ndarray]] = None


def select_transmitters(available: Sequence[DeviceState], group_size: int) -> list[int]:
    """Pick the S devices whose pending updates started from the oldest rounds.

    Minimizes the summed start rounds over subsets of size S, which reduces
    to sorting by (start round, compute completion slot, device index). The
    returned order is the within-round TDMA upload order.
    """
    if group_size < 1:
        raise ConfigError(f"group_size must be >= 1, got {group_size}")
    if len(available) < group_size:
        raise ConfigError(
            f"need at least {group_size} available devices, got {len(available)}"
        )
    ranked = sorted(
        available,
        key=lambda st: (st.last_model_round, st.compute_done_slot, st.device_id),
    )
    return [st.device_id for st in ranked[:group_size]]


def _warmup_group(cfg: SystemConfig, set_index: int) -> list[int]:
    """Pre-assigned recipient set for a negative round index (warm-up).

    Index -1 maps to the last device group, -alpha to group G - alpha + 1.
    """
    g = cfg.num_groups
    s = cfg.group_size
    group = g + set_index + 1  # 1-based group number
    start = (group - 1) * s + 1
    return list(range(start, start + s))


def run_timeline(
    cfg: SystemConfig,
    learner: Optional[RoundLearner] = None,
    *,
    max_rounds: Optional[int] = None,
    record_events: bool = True,
    metrics_every: int = 1,
    keep_model_history: bool = False,
) -> SimResult:
    """Simulate the full slotted schedule, optionally training a model.

    Without a learner only the scheduling is simulated (no gradients are
    computed), which is enough for round counting and staleness checks.
    ``max_rounds`` truncates the run before the slot budget is exhausted.
    Runs are fully deterministic: the scheduler itself draws no randomness,
    and a learner's randomness is keyed on (device, round).
    """
    n = cfg.num_devices
    s = cfg.group_size
    r = cfg.slots_per_transfer
    horizon = cfg.horizon
    alpha = cfg.intentional_delay
    g = cfg.num_groups
    tau_comp = cfg.tau_comp

    devices = {i: DeviceState(i) for i in range(1, n + 1)}
    computing: list[tuple[int, int]] = []  # (done_slot, device_id) heap
    available: list[int] = []
    events: list[TimelineEvent] = []
    stal_records: list[StalenessRecord] = []
    metrics = RunMetrics()
    launch_clocks: list[int] = []
    downlink_ends: list[int] = []
    transmitter_sets: list[tuple[int, ...]] = []

    model = learner.initial_model() if learner is not None else None
    history: Optional[list[np.ndarray]] = [model.copy()] if (keep_model_history and model is not None) else None

    def start_compute(device_id: int, round_index: int, slot: int) -> None:
        st = devices[device_id]
        st.last_model_round = round_index
        st.compute_done_slot = slot + tau_comp - 1
        st.awaiting_model_until_round = None
        if learner is not None:
            # Pure function of (model snapshot, device, round); evaluating at
            # schedule time is equivalent to evaluating during the slots.
            st.pending_update = learner.local_update(device_id, model, round_index)
        heapq.heappush(computing, (st.compute_done_slot, device_id))
        if record_events:
            events.append(TimelineEvent(slot, "compute_start", device_id, round_index))
            events.append(TimelineEvent(st.compute_done_slot, "compute_done", device_id, round_index))

    if alpha == 0:
        initial = list(range(1, n + 1))
    else:
        initial = list(range(1, (g - alpha) * s + 1))
    for dev in initial:
        start_compute(dev, 0, 0)

    clock = 0
    k = 0
    while clock <= horizon and (max_rounds is None or k < max_rounds):
        launch_clocks.append(clock)

        # Wait until S finished updates exist, then admit everything that
        # finished before the first upload slot.
        while len(available) < s:
            if not computing:
                raise RuntimeError("scheduler stalled: no device is computing")
            done_slot, dev = heapq.heappop(computing)
            clock = max(clock, done_slot + 1)
            available.append(dev)
        while computing and computing[0][0] < clock:
            _, dev = heapq.heappop(computing)
            available.append(dev)

        chosen = select_transmitters([devices[d] for d in available], s)
        chosen_set = set(chosen)
        available = [d for d in available if d not in chosen_set]
        transmitter_sets.append(tuple(chosen))

        updates = []
        for i, dev in enumerate(chosen):
            st = devices[dev]
            stal_records.append(StalenessRecord(k, dev, k - st.last_model_round))
            if record_events:
                events.append(TimelineEvent(clock + i * r, "uplink", dev, k))
            if learner is not None:
                updates.append(st.pending_update)
                st.pending_update = None
            if alpha > 0:
                st.awaiting_model_until_round = k + alpha
        clock += s * r

        if metrics_every and k % metrics_every == 0 and learner is not None:
            loss, gsq = learner.round_metrics(model)
        else:
            loss, gsq = float("nan"), float("nan")

        if learner is not None:
            model = learner.apply_round(model, updates)
            if history is not None:
                history.append(model.copy())

        if record_events:
            events.append(TimelineEvent(clock, "downlink", SERVER_ID, k))
        downlink_end = clock + r - 1
        downlink_ends.append(downlink_end)
        clock = downlink_end + 1

        mean_stal = sum(rec.staleness for rec in stal_records[-s:]) / s
        metrics.rounds.append(k)
        metrics.slots.append(downlink_end)
        metrics.staleness.append(mean_stal)
        metrics.loss.append(loss)
        metrics.grad_norm_sq.append(gsq)

        recv_index = k - alpha
        if recv_index >= 0:
            recipients = list(transmitter_sets[recv_index])
        else:
            recipients = _warmup_group(cfg, recv_index)
        for dev in recipients:
            start_compute(dev, k + 1, clock)

        k += 1

    completed = k
    if completed == 1 and downlink_ends[0] >= horizon:
        warnings.warn(
            f"no training round completed within the {horizon}-slot budget",
            stacklevel=2,
        )
        return SimResult(
            config=cfg,
            events=events,
            staleness_records=[],
            metrics=RunMetrics(),
            completed_rounds=0,
            launch_clocks=launch_clocks,
            downlink_end_slots=downlink_ends,
            transmitter_sets=transmitter_sets,
            final_model=model,
            model_history=history,
        )

    return SimResult(
        config=cfg,
        events=events,
        staleness_records=stal_records,
        metrics=metrics,
        completed_rounds=completed,
        launch_clocks=launch_clocks,
        downlink_end_slots=downlink_ends,
        transmitter_sets=transmitter_sets,
        final_model=model,
        model_history=history,
    )


def measured_staleness(records: Sequence[StalenessRecord], round_index: int) -> list[int]:
    """Multiset (sorted) of transmitter staleness values for one round."""
    if not records or round_index > max(rec.round_index for rec in records):
        raise ValueError(f"round {round_index} was not simulated")
    if round_index < 0:
        raise ValueError(f"round_index must be >= 0, got {round_index}")
    return sorted(rec.staleness for rec in records if rec.round_index == round_index)


def average_round_duration(result: SimResult, first_round: int, last_round: int) -> Fraction:
    """Exact mean slots per round between two downlink completions."""
    ends = result.downlink_end_slots
    if not 0 <= first_round < last_round < len(ends):
        raise ValueError(
            f"need 0 <= first < last < {len(ends)}, got ({first_round}, {last_round})"
        )
    return Fraction(ends[last_round] - ends[first_round], last_round - first_round)


def steady_round_duration(result: SimResult, cycles: int = 2) -> Fraction:
    """Average round length over the trailing ``cycles`` full rotations.

    Measured late in the run so warm-up effects are excluded; the window is a
    multiple of the group count so the compute-bound sawtooth averages out.
    """
    g = result.config.num_groups
    window = cycles * g
    last = result.completed_rounds - 1
    if last - window < 0:
        raise ValueError(
            f"run too short: need more than {window + 1} rounds, have {result.completed_rounds}"
        )
    return average_round_duration(result, last - window, last)


def format_trace(events: Sequence[TimelineEvent]) -> str:
    """Line-delimited trace: ``slot,kind,device,round`` with a header."""
    lines = ["slot,kind,device,round"]
    lines.extend(f"{e.slot},{e.kind},{e.device_id},{e.round_index}" for e in events)
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> list[TimelineEvent]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "slot,kind,device,round":
        raise ValueError("trace header missing or malformed")
    out = []
    for ln in lines[1:]:
        slot, kind, device, rnd = ln.split(",")
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        out.append(TimelineEvent(int(slot), kind, int(device), int(rnd)))
    return out


def write_trace(events: Sequence[TimelineEvent], path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_trace(events))
