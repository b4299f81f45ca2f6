"""Closed-form slot accounting for TDMA-scheduled federated training.

Everything here is pure arithmetic on the scenario constants: per-round
compute and communication costs, the average round length under pipelined
(asynchronous) scheduling, the staleness law induced by group rotation, and
the largest downlink deferral that keeps the pipeline saturated.

Average round lengths are kept as exact ``Fraction`` values because the
pipelined average divides an integer slot count by the group count; rounding
here would corrupt horizon-to-round conversions for long runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Union

from .errors import ConfigError

RationalLike = Union[int, float, str, Fraction]


def as_fraction(value: RationalLike) -> Fraction:
    """Convert a user-supplied rate to an exact Fraction.

    Floats go through their shortest decimal repr so that an input such as
    6.4 means 32/5, not the nearest binary double.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(str(value))
    if isinstance(value, str):
        return Fraction(value)
    raise ConfigError(f"cannot interpret {value!r} as a rational number")


@dataclass(frozen=True)
class SystemConfig:
    """All scenario constants for one federated training run.

    Attributes:
        num_devices: N, number of devices holding data shards.
        group_size: S, devices that upload in each training round.
        slots_per_transfer: r, slots needed for one model upload or download.
        samples_per_slot: q, per-device processing rate (samples per slot).
        local_steps: H, gradient steps per local update.
        batch_size: B, mini-batch size per gradient step.
        step_size: eta, server step size.
        horizon: T, total slot budget for the run.
        intentional_delay: alpha, rounds a device defers its downlink
            (0 recovers plain asynchronous operation).
    """

    num_devices: int
    group_size: int
    slots_per_transfer: int = 1
    samples_per_slot: RationalLike = 1
    local_steps: int = 1
    batch_size: int = 1
    step_size: float = 0.01
    horizon: int = 50_000
    intentional_delay: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples_per_slot", as_fraction(self.samples_per_slot))
        if self.num_devices < 1:
            raise ConfigError(f"num_devices must be >= 1, got {self.num_devices}")
        if not 1 <= self.group_size <= self.num_devices:
            raise ConfigError(
                f"group_size must be in [1, num_devices], got {self.group_size} "
                f"with num_devices={self.num_devices}"
            )
        if self.slots_per_transfer < 1:
            raise ConfigError(f"slots_per_transfer must be >= 1, got {self.slots_per_transfer}")
        if self.samples_per_slot <= 0:
            raise ConfigError(f"samples_per_slot must be positive, got {self.samples_per_slot}")
        if self.local_steps < 1:
            raise ConfigError(f"local_steps must be >= 1, got {self.local_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.intentional_delay < 0:
            raise ConfigError(f"intentional_delay must be >= 0, got {self.intentional_delay}")
        if self.intentional_delay > 0:
            if self.num_devices % self.group_size != 0:
                raise ConfigError(
                    "intentional_delay > 0 requires num_devices divisible by group_size"
                )
            if self.intentional_delay > self.num_groups - 1:
                raise ConfigError(
                    f"intentional_delay must be <= num_groups - 1 = {self.num_groups - 1}, "
                    f"got {self.intentional_delay}"
                )

    @classmethod
    def from_times(
        cls,
        num_devices: int,
        group_size: int,
        compute_slots: int,
        slots_per_transfer: int = 1,
        **kwargs,
    ) -> "SystemConfig":
        """Build a config with a prescribed local-compute cost in slots.

        Picks the processing rate q = H*B/compute_slots so that the derived
        compute time equals ``compute_slots`` exactly, leaving the learning
        hyperparameters free.
        """
        if compute_slots < 1:
            raise ConfigError(f"compute_slots must be >= 1, got {compute_slots}")
        local_steps = kwargs.pop("local_steps", 1)
        batch_size = kwargs.pop("batch_size", 1)
        q = Fraction(local_steps * batch_size, compute_slots)
        return cls(
            num_devices=num_devices,
            group_size=group_size,
            slots_per_transfer=slots_per_transfer,
            samples_per_slot=q,
            local_steps=local_steps,
            batch_size=batch_size,
            **kwargs,
        )

    @property
    def num_groups(self) -> int:
        """G, the number of TDMA groups: ceil(N / S)."""
        return -(-self.num_devices // self.group_size)

    @property
    def tau_comp(self) -> int:
        return compute_tau_comp(self.samples_per_slot, self.local_steps, self.batch_size)

    @property
    def tau_comm(self) -> int:
        return compute_tau_comm(self.slots_per_transfer, self.group_size)

    @property
    def tau_asyn(self) -> Fraction:
        return compute_tau_asyn(self)

    def rounds_closed_form(self) -> int:
        """floor(T / tau_asyn): round count predicted by the slot algebra.

        The event simulator's count can differ by a few rounds because of the
        initial compute fill; use that one when comparing against simulated
        traces.
        """
        return math.floor(Fraction(self.horizon) / self.tau_asyn)


@dataclass(frozen=True)
class TimingProfile:
    """Derived per-round slot costs for a configuration."""

    tau_comp: int
    tau_comm: int
    tau_asyn: Fraction
    num_groups: int

    def __post_init__(self) -> None:
        if self.tau_asyn > self.tau_comp + self.tau_comm:
            raise ConfigError(
                "inconsistent profile: average round exceeds compute + comm"
            )


def profile(cfg: SystemConfig) -> TimingProfile:
    return TimingProfile(
        tau_comp=cfg.tau_comp,
        tau_comm=cfg.tau_comm,
        tau_asyn=cfg.tau_asyn,
        num_groups=cfg.num_groups,
    )


def compute_tau_comp(samples_per_slot: RationalLike, local_steps: int, batch_size: int) -> int:
    """Slots needed for one local update: ceil(H * B / q)."""
    q = as_fraction(samples_per_slot)
    if q <= 0 or local_steps < 1 or batch_size < 1:
        raise ConfigError(
            f"compute_tau_comp needs positive inputs, got q={q}, "
            f"H={local_steps}, B={batch_size}"
        )
    return math.ceil(Fraction(local_steps * batch_size) / q)


def compute_tau_comm(slots_per_transfer: int, group_size: int) -> int:
    """Slots of channel time per round: r * (S + 1), i.e. S uploads plus one broadcast."""
    if slots_per_transfer < 1 or group_size < 1:
        raise ConfigError(
            f"compute_tau_comm needs positive inputs, got r={slots_per_transfer}, "
            f"S={group_size}"
        )
    return slots_per_transfer * (group_size + 1)


def compute_tau_asyn(cfg: SystemConfig) -> Fraction:
    """Average slots per round once group rotation is in steady state.

    When local compute is at least as long as the channel time of the other
    G - 1 groups, a cycle of G rounds costs tau_comp + r(S+1) slots; otherwise
    the channel never idles and each round costs exactly tau_comm.
    """
    r = cfg.slots_per_transfer
    s = cfg.group_size
    g = cfg.num_groups
    tau_comp = cfg.tau_comp
    if tau_comp >= r * (g - 1) * (s + 1):
        return Fraction(tau_comp + r * (s + 1), g)
    return Fraction(cfg.tau_comm)


def staleness_closed_form(round_index: int, cfg: SystemConfig) -> int:
    """Staleness of every upload in a given round under plain async rotation.

    Equals the round index while the initial model is still being consumed,
    then stays at G - 1. Requires intentional_delay == 0; the deferred-downlink
    variant follows ``idfl_staleness`` instead.
    """
    if cfg.intentional_delay != 0:
        raise ConfigError(
            "staleness_closed_form applies only when intentional_delay == 0; "
            "use idfl_staleness for deferred downlinks"
        )
    if round_index < 0:
        raise ConfigError(f"round_index must be >= 0, got {round_index}")
    g = cfg.num_groups
    return round_index if round_index < g else g - 1


def idfl_staleness(round_index: int, cfg: SystemConfig) -> int:
    """Staleness of uploads in a round when downlinks are deferred by alpha.

    The first G - alpha rounds still consume the initial model, so staleness
    grows with the round index; from then on every upload is exactly
    G - 1 - alpha rounds old. With alpha = 0 this reduces to the plain
    rotation law.
    """
    if round_index < 0:
        raise ConfigError(f"round_index must be >= 0, got {round_index}")
    g = cfg.num_groups
    alpha = cfg.intentional_delay
    d_star = g - 1 - alpha
    return round_index if round_index < g - alpha else d_star


class DelayChoice(NamedTuple):
    alpha: int
    effective_delay: int


def optimal_intentional_delay(cfg: SystemConfig) -> DelayChoice:
    """Largest downlink deferral that leaves the round length unchanged.

    With x = tau_comp / r: if x >= (G-1)(S+1) the compute window already
    fills the rotation gap and no deferral is free, so alpha = 0 and the
    steady staleness stays G - 1. Otherwise the effective delay d* is the
    unique integer with (d*-1)(S+1) < x <= d*(S+1) and alpha = G - d* - 1.

    Requires N divisible by S (static group rotation).
    """
    if cfg.num_devices % cfg.group_size != 0:
        raise ConfigError(
            "optimal_intentional_delay requires num_devices divisible by group_size"
        )
    g = cfg.num_groups
    s = cfg.group_size
    x = Fraction(cfg.tau_comp, cfg.slots_per_transfer)
    if x >= (g - 1) * (s + 1):
        return DelayChoice(alpha=0, effective_delay=g - 1)
    d_star = math.ceil(x / (s + 1))
    return DelayChoice(alpha=g - d_star - 1, effective_delay=d_star)
