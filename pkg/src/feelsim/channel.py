"""Uplink channel model: Rician fading draws, receive beamforming, and rate.

The base station has a small antenna array; each worker uploads through a
distance-attenuated Rician channel.  Beamforming treats the other scheduled
workers as interferers and maximizes post-combining SINR per unit transmit
power; the achievable rate then follows the usual bandwidth-scaled log law.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ComplexVector, max_generalized_eigvec, rayleigh_quotient

_LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class ChannelRealization:
    """One worker's uplink channel vector for one round."""

    worker_id: int
    round_index: int
    h: ComplexVector  # shape (antennas,), complex128


@dataclass(frozen=True)
class BeamState:
    """Receive combiner and the per-watt SINR gain it achieves."""

    w: ComplexVector  # unit-norm combiner
    beta: float  # |h^H w|^2 / (w^H (interference + noise) w), in 1/W terms


def sample_channel(
    rng: np.random.Generator,
    distance_m: float,
    pathloss_exp: float,
    rician_k_db: float,
    antennas: int,
    los_angle: float | None = None,
) -> ComplexVector:
    """Draw one Rician-faded channel vector.

    The line-of-sight component is a unit-modulus steering vector at angle
    los_angle (drawn uniformly from the stream when not given); the scattered
    component is i.i.d. complex Gaussian with unit power per antenna.  The
    whole vector is scaled by sqrt(distance^-pathloss_exp), so the expected
    per-antenna power equals the large-scale pathloss exactly.
    """
    if distance_m <= 0.0:
        raise ValueError(f"distance must be positive, got {distance_m}")
    if antennas < 1:
        raise ValueError(f"need at least one antenna, got {antennas}")
    k_lin = 10.0 ** (rician_k_db / 10.0)
    if los_angle is None:
        los_angle = float(rng.uniform(0.0, 2.0 * np.pi))
    m = np.arange(antennas)
    v_los = np.exp(1j * np.pi * m * np.sin(los_angle))
    g = (rng.standard_normal(antennas) + 1j * rng.standard_normal(antennas)) / np.sqrt(2.0)
    small = np.sqrt(k_lin / (k_lin + 1.0)) * v_los + np.sqrt(1.0 / (k_lin + 1.0)) * g
    return np.sqrt(distance_m ** (-pathloss_exp)) * small


def beam_and_gain(
    target: ComplexVector,
    interferers: list[ComplexVector],
    noise_power_w: float,
) -> BeamState:
    """Best receive combiner for `target` against `interferers` plus noise.

    Maximizes |h^H w|^2 / (w^H A w) with A = sum of interferer outer products
    plus noise_power_w * I.  With no interferers this reduces to matched
    combining and beta = ||h||^2 / noise_power_w.
    """
    if noise_power_w <= 0.0:
        raise ValueError(f"noise power must be positive, got {noise_power_w}")
    h = np.asarray(target, dtype=np.complex128)
    a = noise_power_w * np.eye(h.size, dtype=np.complex128)
    for hp in interferers:
        hp = np.asarray(hp, dtype=np.complex128)
        if hp.shape != h.shape:
            raise ValueError("interferer and target channel shapes differ")
        a += np.outer(hp, hp.conj())
    w = max_generalized_eigvec(h, a)
    return BeamState(w=w, beta=rayleigh_quotient(h, a, w))


def uplink_rate(bandwidth_hz: float, beta: float, power_w: float) -> float:
    """Achievable uplink rate in bits/s on a bandwidth_hz-wide allocation."""
    if bandwidth_hz <= 0.0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_hz}")
    if power_w < 0.0:
        raise ValueError(f"transmit power must be non-negative, got {power_w}")
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    # log1p keeps the low-SINR regime accurate to full precision
    return bandwidth_hz * np.log1p(beta * power_w / bandwidth_hz) / _LN2
