"""Discrete PID controller analysis.

Three views of the same controller: time-domain step response against a
second-order plant, frequency response of the controller transfer function,
and the receptive-field tap expansion that maps stacked 1-D convolutions onto
the same proportional/integral split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import prod

import numpy as np


class SimulationDiverged(RuntimeError):
    """Closed loop blew past the amplitude guard."""

    def __init__(self, step: int, value: float):
        super().__init__(f"output magnitude {value:.3e} exceeded 1e6 at step {step}")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class ControllerGains:
    kp: float
    ki: float
    kd: float = 0.0


@dataclass(frozen=True)
class PlantSpec:
    """Second-order plant  G(s) = dc_gain * wn^2 / (s^2 + 2*zeta*wn*s + wn^2)."""

    natural_freq: float = 1.0
    damping: float = 0.5
    dc_gain: float = 1.0


@dataclass
class StepResult:
    t: np.ndarray
    y: np.ndarray
    e: np.ndarray
    c: np.ndarray
    dt: float
    setpoint: float

    @property
    def overshoot(self) -> float:
        """Peak excess of the output over the setpoint, clamped at zero."""
        return max(0.0, float(self.y.max()) - self.setpoint)

    @property
    def steady_state_error(self) -> float:
        return float(abs(self.e[-1]))


def plant_step(plant: PlantSpec, state: np.ndarray, u: float, dt: float) -> np.ndarray:
    """One RK4 step of the plant with the input held constant (zero-order hold)."""
    wn = plant.natural_freq
    two_zw = 2.0 * plant.damping * wn
    forced = plant.dc_gain * wn * wn * u

    def deriv(s):
        return np.array([s[1], forced - wn * wn * s[0] - two_zw * s[1]])

    k1 = deriv(state)
    k2 = deriv(state + 0.5 * dt * k1)
    k3 = deriv(state + 0.5 * dt * k2)
    k4 = deriv(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_step(
    gains: ControllerGains,
    plant: PlantSpec = PlantSpec(),
    dt: float = 0.01,
    horizon: float = 30.0,
    setpoint: float = 1.0,
) -> StepResult:
    """Closed-loop unit-step response with a discrete PID controller.

    Controller at sample n:
        c[n] = kp*e[n] + ki*dt*sum(e[0..n]) + kd*(e[n]-e[n-1])/dt
    The accumulated error is scaled by dt so gains stay meaningful in plant
    time units regardless of the sampling period; the first-step derivative
    is zero (no setpoint kick). The plant integrates with RK4 under
    zero-order hold. |y| > 1e6 raises SimulationDiverged.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if horizon <= 0.0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if plant.natural_freq <= 0.0:
        raise ValueError(f"natural_freq must be positive, got {plant.natural_freq}")
    if plant.damping < 0.0:
        raise ValueError(f"damping must be nonnegative, got {plant.damping}")
    if dt * plant.natural_freq >= 0.1:
        raise ValueError(
            f"dt*natural_freq = {dt * plant.natural_freq:.3g} too coarse for the "
            "fixed-step integrator (must stay below 0.1)"
        )
    n_steps = int(round(horizon / dt))
    t = np.arange(n_steps) * dt
    y = np.zeros(n_steps)
    e = np.zeros(n_steps)
    c = np.zeros(n_steps)
    state = np.zeros(2)
    integral = 0.0
    prev_err = setpoint  # e[-1] := e[0] so the derivative term starts at zero
    for n in range(n_steps):
        yn = state[0]
        if abs(yn) > 1e6:
            raise SimulationDiverged(n, yn)
        err = setpoint - yn
        integral += err * dt
        u = gains.kp * err + gains.ki * integral + gains.kd * (err - prev_err) / dt
        prev_err = err
        y[n] = yn
        e[n] = err
        c[n] = u
        state = plant_step(plant, state, u, dt)
    return StepResult(t=t, y=y, e=e, c=c, dt=dt, setpoint=setpoint)


@dataclass
class FrequencyResponse:
    omega: np.ndarray
    p_mag: np.ndarray
    i_mag: np.ndarray
    d_mag: np.ndarray
    total_mag: np.ndarray


def frequency_response(gains: ControllerGains, omega) -> FrequencyResponse:
    """Evaluate C(omega) = kp + ki/(1 - e^{-j w}) + kd*(1 - e^{-j w}).

    omega is in radians/sample on (0, pi]; the integral term is singular at
    omega = 0, so non-positive frequencies are rejected.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=np.float64))
    if np.any(w <= 0.0) or np.any(w > np.pi):
        raise ValueError("omega must lie in (0, pi]")
    one_minus = 1.0 - np.exp(-1j * w)
    p = np.full_like(w, float(abs(gains.kp)))
    i = np.abs(gains.ki / one_minus)
    d = np.abs(gains.kd * one_minus)
    total = np.abs(gains.kp + gains.ki / one_minus + gains.kd * one_minus)
    return FrequencyResponse(omega=w, p_mag=p, i_mag=i, d_mag=d, total_mag=total)


@dataclass
class TapExpansion:
    """Input-offset histogram of a stack of odd-kernel 1-D convolutions.

    counts[k] is the number of kernel-weight monomials (one tap chosen per
    layer) whose taps land on input offset offsets[k]; counts sum to the
    product of the kernel sizes.
    """

    kernels: tuple
    strides: tuple
    offsets: np.ndarray
    counts: np.ndarray
    total_items: int = field(init=False)

    def __post_init__(self):
        self.total_items = int(self.counts.sum())


def receptive_field_expansion(kernels, strides) -> TapExpansion:
    """Enumerate tap offsets for stacked 1-D convs.

    A tap choice (d_1..d_L), d_m in [-(k_m-1)/2, (k_m-1)/2], reaches input
    offset sum(d_m * prod(strides before layer m)).
    """
    kernels = tuple(int(k) for k in kernels)
    strides = tuple(int(s) for s in strides)
    if len(kernels) != len(strides):
        raise ValueError(f"{len(kernels)} kernels vs {len(strides)} strides")
    if not kernels:
        raise ValueError("at least one layer required")
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and positive, got {k}")
    for s in strides:
        if s < 1:
            raise ValueError(f"strides must be >= 1, got {s}")
    counts = {0: 1}
    jump = 1
    for k, s in zip(kernels, strides):
        half = (k - 1) // 2
        nxt: dict[int, int] = {}
        for off, cnt in counts.items():
            for d in range(-half, half + 1):
                key = off + d * jump
                nxt[key] = nxt.get(key, 0) + cnt
        counts = nxt
        jump *= s
    offsets = np.array(sorted(counts), dtype=np.int64)
    tallies = np.array([counts[o] for o in offsets], dtype=np.int64)
    expansion = TapExpansion(kernels=kernels, strides=strides, offsets=offsets, counts=tallies)
    assert expansion.total_items == prod(kernels)
    return expansion


def locality_ratio(expansion: TapExpansion, window: int) -> Fraction:
    """Exact fraction of tap monomials that stay within |offset| <= window."""
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    if expansion.total_items == 0:
        raise ValueError("empty tap expansion")
    inside = int(expansion.counts[np.abs(expansion.offsets) <= window].sum())
    return Fraction(inside, expansion.total_items)
