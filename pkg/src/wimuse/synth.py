"""Physics-based synthetic CSI generator.

Per subcarrier frequency f the channel is a multipath sum
h(f, t) = sum_i a_i(t) * exp(-j*2*pi*f*tau_i(t)); samples store |h| plus
Gaussian measurement noise. Latent factors map to signal structure: the
location fixes the static path geometry, the user rescales reflected paths and
adds a signature path, and the gesture drives the time-varying modulation of a
dynamic path. Everything is a pure function of the config (seed included).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    TASK_GESTURE,
    TASK_LOCATION,
    TASK_USER,
    CsiDataset,
    CsiSample,
    DatasetMeta,
    TaskSpec,
)


@dataclass(frozen=True)
class PathParams:
    """One propagation path: base attenuation/delay plus optional time profiles.

    ``amplitude_mod`` multiplies the attenuation and ``delay_mod_s`` adds to the
    delay, both sampled on the synthesis time grid.
    """

    attenuation: float
    delay_s: float
    amplitude_mod: np.ndarray | None = None
    delay_mod_s: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.attenuation) or self.attenuation < 0:
            raise ValueError(f"attenuation must be finite and >= 0, got {self.attenuation}")
        if not np.isfinite(self.delay_s) or self.delay_s < 0:
            raise ValueError(f"delay must be finite and >= 0, got {self.delay_s}")
        for name in ("amplitude_mod", "delay_mod_s"):
            mod = getattr(self, name)
            if mod is not None:
                mod = np.asarray(mod, dtype=np.float64)
                if not np.isfinite(mod).all():
                    raise ValueError(f"{name} contains non-finite values")
                object.__setattr__(self, name, mod)

    def profiles(self, n_time: int) -> tuple[np.ndarray, np.ndarray]:
        """Attenuation and delay series of length n_time."""
        a = np.full(n_time, self.attenuation, dtype=np.float64)
        tau = np.full(n_time, self.delay_s, dtype=np.float64)
        if self.amplitude_mod is not None:
            if self.amplitude_mod.shape != (n_time,):
                raise ValueError(f"amplitude_mod length {self.amplitude_mod.shape} != {n_time}")
            a = a * self.amplitude_mod
        if self.delay_mod_s is not None:
            if self.delay_mod_s.shape != (n_time,):
                raise ValueError(f"delay_mod_s length {self.delay_mod_s.shape} != {n_time}")
            tau = tau + self.delay_mod_s
        return a, tau


def synth_cir(paths: Sequence[PathParams], f_hz: float, t_grid) -> np.ndarray:
    """Frequency-domain response of the multipath sum at one subcarrier.

    Returns the complex series sum_i a_i(t) * exp(-j*2*pi*f*tau_i(t)) evaluated
    on ``t_grid``.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("t_grid must be a non-empty 1-D array")
    if t.size > 1 and not (np.diff(t) > 0).all():
        raise ValueError("t_grid must be strictly increasing")
    if len(paths) == 0:
        raise ValueError("at least one propagation path is required")
    return _response_matrix(paths, np.array([float(f_hz)]), t.size)[0]


def _response_matrix(paths: Sequence[PathParams], freqs: np.ndarray, n_time: int) -> np.ndarray:
    """Vectorized h(f, t) for all subcarriers at once; shape [S, P]."""
    amps = np.empty((len(paths), n_time))
    taus = np.empty((len(paths), n_time))
    for i, p in enumerate(paths):
        amps[i], taus[i] = p.profiles(n_time)
    phase = np.exp(-2j * np.pi * freqs[:, None, None] * taus[None, :, :])  # [S, I, P]
    return np.einsum("ip,sip->sp", amps, phase)


@dataclass(frozen=True)
class SynthConfig:
    """Configuration of the synthetic dataset; the generator is a pure function of it."""

    num_gestures: int = 6
    num_locations: int = 5
    num_users: int = 5
    samples_per_combo: int = 20
    L: int = 1
    S: int = 16
    P: int = 128
    base_frequency_hz: float = 5.18e9
    subcarrier_spacing_hz: float = 312.5e3
    sampling_rate_hz: float = 100.0
    noise_sigma: float = 0.05
    jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_combo < 1:
            raise ValueError(f"samples_per_combo must be >= 1, got {self.samples_per_combo}")
        for name in ("num_gestures", "num_locations", "num_users"):
            # each factor is a classification task, so it needs >= 2 classes
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2, got {getattr(self, name)}")
        for name in ("L", "S", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")

    @property
    def total_samples(self) -> int:
        return self.num_gestures * self.num_locations * self.num_users * self.samples_per_combo

    @property
    def t_grid(self) -> np.ndarray:
        return np.arange(self.P, dtype=np.float64) / self.sampling_rate_hz

    @property
    def frequencies(self) -> np.ndarray:
        return self.base_frequency_hz + np.arange(self.S) * self.subcarrier_spacing_hz

    def task_specs(self) -> tuple[TaskSpec, ...]:
        return (
            TaskSpec.with_generic_names(TASK_GESTURE, self.num_gestures, "gesture"),
            TaskSpec.with_generic_names(TASK_LOCATION, self.num_locations, "location"),
            TaskSpec.with_generic_names(TASK_USER, self.num_users, "user"),
        )

    def meta(self) -> DatasetMeta:
        return DatasetMeta(
            tasks=self.task_specs(),
            L=self.L, S=self.S, P=self.P,
            sampling_rate_hz=self.sampling_rate_hz,
            duration_s=self.P / self.sampling_rate_hz,
            source="SYNTH",
        )


def _rng(cfg: SynthConfig, *labels: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFF, *labels]))


@functools.lru_cache(maxsize=8)
def _world(cfg: SynthConfig) -> dict:
    """Deterministic per-entity parameter tables (delays in seconds)."""
    rng = _rng(cfg, 0)
    nl, nu = cfg.num_locations, cfg.num_users
    return {
        # per location: line-of-sight + two reflected static paths + dynamic path geometry
        "los_delay": rng.uniform(5e-9, 20e-9, nl),
        "los_atten": rng.uniform(0.8, 1.0, nl),
        "refl_delay": rng.uniform(20e-9, 120e-9, (nl, 2)),
        "refl_atten": rng.uniform(0.35, 0.7, (nl, 2)),
        "dyn_delay": rng.uniform(60e-9, 110e-9, nl),
        "dyn_atten": rng.uniform(0.45, 0.75, nl),
        # per user: global scale on reflected paths + signature path
        "user_scale": rng.uniform(0.55, 1.4, nu),
        "user_delay": rng.uniform(130e-9, 220e-9, nu),
        "user_atten": rng.uniform(0.3, 0.55, nu),
    }


def _gesture_waveform(cfg: SynthConfig, gesture: int, phase: float, depth: float):
    """Time profile of the dynamic path for one gesture class.

    Classes differ in modulation frequency (gesture+2 cycles per window) and in
    waveform shape (alternating smooth / sharpened oscillation).
    """
    x = 2.0 * np.pi * (gesture + 2) * np.arange(cfg.P) / cfg.P + phase
    base = np.sin(x)
    if gesture % 2 == 1:
        base = np.tanh(2.2 * base) / np.tanh(2.2)
    amplitude_mod = np.clip(1.0 + depth * base, 0.05, None)
    delay_mod = 1.5e-9 * base
    return amplitude_mod, delay_mod


def sample_paths(cfg: SynthConfig, gesture: int, location: int, user: int, rep: int,
                 link: int = 0) -> list[PathParams]:
    """Propagation paths for one (gesture, location, user, repetition) on one link.

    Per-sample jitter (phase, depth, attenuation wobble) is shared across links;
    each link adds a small deterministic delay offset and attenuation factor.
    """
    w = _world(cfg)
    jrng = _rng(cfg, 1, gesture, location, user, rep)
    phase = float(jrng.uniform(0.0, 2.0 * np.pi)) * (1.0 if cfg.jitter > 0 else 0.0)
    depth = 0.45 * (1.0 + 0.15 * float(jrng.standard_normal()) * cfg.jitter)
    wobble = 1.0 + 0.05 * jrng.standard_normal(5) * cfg.jitter

    link_delay = 3e-9 * link
    link_gain = 0.95 ** link
    scale = float(w["user_scale"][user])

    amp_mod, delay_mod = _gesture_waveform(cfg, gesture, phase, depth)
    paths = [
        PathParams(link_gain * w["los_atten"][location] * wobble[0],
                   w["los_delay"][location] + link_delay),
        PathParams(link_gain * scale * w["refl_atten"][location, 0] * wobble[1],
                   w["refl_delay"][location, 0] + link_delay),
        PathParams(link_gain * scale * w["refl_atten"][location, 1] * wobble[2],
                   w["refl_delay"][location, 1] + link_delay),
        PathParams(link_gain * w["user_atten"][user] * wobble[3],
                   w["user_delay"][user] + link_delay),
        PathParams(link_gain * scale * w["dyn_atten"][location] * wobble[4],
                   w["dyn_delay"][location] + link_delay,
                   amplitude_mod=amp_mod, delay_mod_s=delay_mod),
    ]
    return paths


def synth_sample_amplitude(cfg: SynthConfig, gesture: int, location: int, user: int,
                           rep: int) -> np.ndarray:
    """Noise-free amplitude [L, S, P] for one latent combination."""
    freqs = cfg.frequencies
    out = np.empty((cfg.L, cfg.S, cfg.P), dtype=np.float64)
    for link in range(cfg.L):
        h = _response_matrix(sample_paths(cfg, gesture, location, user, rep, link), freqs, cfg.P)
        out[link] = np.abs(h)
    return out


def synth_dataset(cfg: SynthConfig) -> CsiDataset:
    """Generate the full labelled dataset described by ``cfg``."""
    meta = cfg.meta()
    samples = []
    for g in range(cfg.num_gestures):
        for loc in range(cfg.num_locations):
            for u in range(cfg.num_users):
                for rep in range(cfg.samples_per_combo):
                    amp = synth_sample_amplitude(cfg, g, loc, u, rep)
                    if cfg.noise_sigma > 0:
                        nrng = _rng(cfg, 2, g, loc, u, rep)
                        amp = amp + cfg.noise_sigma * nrng.standard_normal(amp.shape)
                    amp = np.clip(amp, 0.0, None).astype(np.float32)
                    samples.append(CsiSample(
                        f"g{g}_l{loc}_u{u}_r{rep}",
                        amp,
                        {TASK_GESTURE: g, TASK_LOCATION: loc, TASK_USER: u},
                    ))
    return CsiDataset(meta, samples)
