"""Seeded synthetic drive cycles with battery-fault injection.

Healthy cycles mix band-limited sinusoids per continuous channel, carry
piecewise-constant discrete channels (gear selector, brake) and fixed
cross-channel couplings: motor torque lags the driver request, battery
current and voltage follow motor torque.  A faulted cycle is the healthy
cycle built from the same seed with two post-hoc changes:

* an intermittent multiplicative sag on the battery voltage channels, and
* a weakened torque-to-current coupling plus extra current noise.

Because faults are applied after the healthy signal is drawn,
``generate_cycle(seed, cfg, faulted=False)`` is the exact healthy twin of
``generate_cycle(seed, cfg, faulted=True)``.

Each cycle ``i`` of a dataset draws from ``SeedSequence(config.seed).spawn``
child ``i``; the child is split again into a signal stream and a fault
stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FAULTED, HEALTHY, DriveCycle
from .errors import ConfigurationError

TORQUE = ("engine_torque", "motor_torque", "gearbox_torque", "driver_torque_request")
RPM = ("engine_rpm", "motor_rpm", "gearbox_rpm")
N_CELLS = 8
CELLS = tuple(f"cell_voltage_{k}" for k in range(1, N_CELLS + 1))
POWER = ("battery_soc", "battery_voltage", "battery_current", "battery_temperature") + CELLS
DRIVE = ("prndl_state", "vehicle_speed", "brake_status")
NAMED = TORQUE + RPM + POWER + DRIVE

# Channels the voltage sag is applied to.
SAG_CHANNELS = ("battery_voltage",) + CELLS

_MAXIMA = {
    "engine_torque": 400.0, "motor_torque": 300.0, "gearbox_torque": 800.0,
    "driver_torque_request": 400.0, "engine_rpm": 6500.0, "motor_rpm": 12000.0,
    "gearbox_rpm": 6000.0, "battery_soc": 100.0, "battery_voltage": 420.0,
    "battery_current": 250.0, "battery_temperature": 60.0,
    **{name: 4.4 for name in CELLS},
    "prndl_state": 4.0, "vehicle_speed": 200.0, "brake_status": 1.0,
}

# Raw-unit resolution of the emitted signals, in decimal places.
RESOLUTION_DECIMALS = 3


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_healthy: int = 10
    n_faulted: int = 5
    cycle_length: int = 2000
    feature_count: int = 58
    sag_depth: float = 0.6
    sag_duty: float = 0.5
    sag_period: tuple = (16, 48)
    coupling_perturbation: float = 0.6
    noise: float = 0.005

    def __post_init__(self):
        if self.n_healthy < 0 or self.n_faulted < 0:
            raise ConfigurationError("cycle counts must be >= 0")
        if self.cycle_length < 1:
            raise ConfigurationError("cycle_length must be >= 1")
        if not len(NAMED) <= self.feature_count <= 64:
            raise ConfigurationError(f"feature_count must be in [{len(NAMED)}, 64]")
        if not (0 <= self.sag_depth < 1 and 0 <= self.sag_duty <= 1):
            raise ConfigurationError("sag_depth must be in [0, 1) and sag_duty in [0, 1]")
        lo, hi = self.sag_period
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad sag_period {self.sag_period}")


def feature_names(feature_count: int = 58) -> tuple:
    return NAMED + tuple(f"aux_{i:02d}" for i in range(feature_count - len(NAMED)))


def feature_maxima(feature_count: int = 58) -> np.ndarray:
    names = feature_names(feature_count)
    return np.array([_MAXIMA.get(n, 100.0) for n in names])


def _sinusoids(rng, t, n, periods=(150.0, 2500.0), amp=0.25):
    """Sum of ``n`` sinusoids with log-uniform periods (in steps); peak <= amp."""
    p = np.exp(rng.uniform(np.log(periods[0]), np.log(periods[1]), size=n))
    a = rng.dirichlet(np.ones(n)) * amp
    ph = rng.uniform(0, 2 * np.pi, size=n)
    return (a[:, None] * np.sin(2 * np.pi * t[None, :] / p[:, None] + ph[:, None])).sum(axis=0)


def _piecewise(rng, length, values, probs, seg):
    out = np.empty(length)
    i = 0
    while i < length:
        n = int(rng.integers(seg[0], seg[1] + 1))
        out[i : i + n] = rng.choice(values, p=probs)
        i += n
    return out


def _lag(x, k):
    return np.concatenate([np.full(k, x[0]), x[: len(x) - k]]) if k else x.copy()


def sag_mask(rng: np.random.Generator, length: int, duty: float, period: tuple) -> np.ndarray:
    """Periodic on/off mask whose on-fraction is at least ``duty``.

    On-runs last ``ceil(duty * P)`` of every ``P`` steps with a random phase;
    if the truncated final period leaves the fraction short, the latest off
    steps are switched on.
    """
    p = int(rng.integers(period[0], period[1] + 1))
    on = int(np.ceil(duty * p))
    phase = int(rng.integers(0, p))
    mask = ((np.arange(length) + phase) % p) < on
    deficit = int(np.ceil(duty * length - 1e-9)) - int(mask.sum())
    if deficit > 0:
        off = np.flatnonzero(~mask)
        mask[off[-deficit:]] = True
    return mask


def _healthy_signals(rng: np.random.Generator, cfg: SynthConfig) -> dict:
    """Normalized-unit channels plus the coupling quantities faults act on."""
    T = cfg.cycle_length
    t = np.arange(T, dtype=np.float64)
    nz = lambda: rng.normal(0.0, cfg.noise, size=T)  # noqa: E731
    sig = {}

    speed = np.clip(0.35 + _sinusoids(rng, t, 4, (400.0, 3000.0), 0.3), 0.0, None)
    sig["vehicle_speed"] = speed + nz()
    prndl = np.zeros(T)
    if T > 30:
        prndl[30:] = _piecewise(rng, T - 30, [0.5, 0.75, 1.0], [0.05, 0.85, 0.10], (150, 600))
    sig["prndl_state"] = prndl
    sig["brake_status"] = _piecewise(rng, T, [0.0, 1.0], [0.7, 0.3], (20, 200))

    request = 0.45 + _sinusoids(rng, t, 3, (60.0, 600.0), 0.3)
    sig["driver_torque_request"] = request + nz()
    lag_m = int(rng.integers(3, 8))
    motor = 0.9 * _lag(request, lag_m) - 0.05
    sig["motor_torque"] = motor + nz()
    sig["engine_torque"] = 0.5 * request + 0.1 + _sinusoids(rng, t, 2, (100.0, 800.0), 0.1) + nz()
    sig["gearbox_torque"] = 0.45 * (sig["engine_torque"] + motor) + 0.05 + nz()

    sig["motor_rpm"] = 0.8 * speed + 0.05 + nz()
    sig["gearbox_rpm"] = 0.7 * speed + 0.1 + nz()
    sig["engine_rpm"] = 0.25 + 0.5 * speed + _sinusoids(rng, t, 2, (80.0, 500.0), 0.08) + nz()

    lag_c = int(rng.integers(2, 6))
    coupled = 0.85 * _lag(motor, lag_c)
    current_offset = 0.1 + rng.uniform(-0.03, 0.03)
    sig["battery_current"] = coupled + current_offset + nz()

    v0 = rng.uniform(0.80, 0.92)
    voltage = v0 - 0.12 * coupled
    sig["battery_voltage"] = voltage + nz()
    for name in CELLS:
        sig[name] = (voltage + rng.uniform(-0.01, 0.01)) * 0.9 + nz()

    soc0 = rng.uniform(0.6, 0.9)
    sig["battery_soc"] = soc0 - 0.1 * t / max(T, 1) + 0.01 * np.sin(2 * np.pi * t / 700.0) + nz()
    sig["battery_temperature"] = rng.uniform(0.4, 0.5) + 0.15 * t / max(T, 1) + nz()

    for name in feature_names(cfg.feature_count)[len(NAMED):]:
        sig[name] = rng.uniform(0.3, 0.7) + _sinusoids(rng, t, 3, (300.0, 3000.0), 0.1) + nz()

    return {"signals": sig, "coupled": coupled}


def _apply_fault(rng: np.random.Generator, healthy: dict, cfg: SynthConfig) -> np.ndarray:
    sig = healthy["signals"]
    mask = sag_mask(rng, cfg.cycle_length, cfg.sag_duty, cfg.sag_period)
    scale = np.where(mask, 1.0 - cfg.sag_depth, 1.0)
    for name in SAG_CHANNELS:
        sig[name] = sig[name] * scale
    extra = rng.normal(0.0, 4 * cfg.noise, size=cfg.cycle_length)
    sig["battery_current"] = sig["battery_current"] - cfg.coupling_perturbation * healthy["coupled"] + extra
    return mask


def _child(ss: np.random.SeedSequence, k: int) -> np.random.SeedSequence:
    # Stateless equivalent of ss.spawn(): child k is fixed regardless of prior spawns.
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (k,))


def generate_cycle(seed, cfg: SynthConfig, faulted: bool, cycle_id: str = "cycle") -> DriveCycle:
    """One raw-unit cycle; ``seed`` is an int or a ``SeedSequence``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    signal_rng = np.random.default_rng(_child(ss, 0))
    healthy = _healthy_signals(signal_rng, cfg)
    meta = {}
    if faulted:
        meta["sag_mask"] = _apply_fault(np.random.default_rng(_child(ss, 1)), healthy, cfg)
    names = feature_names(cfg.feature_count)
    maxima = feature_maxima(cfg.feature_count)
    norm = np.stack([healthy["signals"][n] for n in names], axis=1)
    raw = np.round(norm * maxima, RESOLUTION_DECIMALS)
    return DriveCycle(cycle_id, FAULTED if faulted else HEALTHY, raw, names, maxima, meta=meta)


def generate_synthetic(config: SynthConfig) -> list[DriveCycle]:
    """All cycles of a dataset: healthy ones first, then faulted, ids ``healthy_0000`` ..."""
    root = np.random.SeedSequence(config.seed)
    out = []
    for i in range(config.n_healthy + config.n_faulted):
        child = _child(root, i)
        faulted = i >= config.n_healthy
        k = i - config.n_healthy if faulted else i
        cid = f"{FAULTED if faulted else HEALTHY}_{k:04d}"
        c = generate_cycle(child, config, faulted, cid)
        c.meta["seed"] = f"{config.seed}/{i}"
        out.append(c)
    return out
