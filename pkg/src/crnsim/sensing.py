"""Sensing models for the radar network.

Two channels per node: an active radar with deterministic detection inside
a hard range gate, and a passive RF receiver whose reach follows the
one-way link budget

    SNR = P_t G_t G_r lambda^2 / ((4 pi R)^2 P_n L),   P_n = k T_0 F B.

Passive interception requires three things at once: the emitter within the
SNR-limited range, the emitter actually transmitting, and the node parked
in passive mode. Detections above that threshold are reliable, so the true
signal type is carried through and only the bearing is noisy.

Scalar functions operate on one node/target pair; the *_batch variants
evaluate every pair at once for the simulation hot path and share the same
gating rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from crnsim.bandit import NodeMode

if TYPE_CHECKING:
    from crnsim.scenario import Node, Target, TargetClass

BOLTZMANN_J_PER_K = 1.380649e-23
REFERENCE_TEMP_K = 290.0

# DoA gate for matching a passive detection to a predicted track bearing:
# three sigma of the 2 degree bearing noise
DOA_GATE_RAD = math.radians(6.0)


class ZeroRange(ValueError):
    """Link budget evaluated at zero separation."""


@dataclass(frozen=True)
class ReceiverParams:
    """Passive receiver front end. Defaults: 10 dB-equivalent noise factor,
    1 MHz bandwidth, unity gain, 3 dB system loss, 1 GHz band."""

    noise_figure: float = 10.0
    bandwidth_hz: float = 1.0e6
    gain: float = 1.0
    system_loss: float = 2.0
    wavelength_m: float = 0.3


@dataclass(frozen=True)
class SensorNoise:
    """Per-channel measurement noise, one sigma."""

    sigma_range_m: float = 25.0
    sigma_azimuth_rad: float = math.radians(1.0)
    sigma_elevation_rad: float = math.radians(1.0)
    sigma_radial_velocity: float = 1.0
    sigma_angular_velocity_rad: float = math.radians(0.5)
    sigma_doa_rad: float = math.radians(2.0)


@dataclass(frozen=True)
class RadarMeasurement:
    node_id: int
    target_id: int  # ground-truth link, used for scoring/association only
    range_m: float
    azimuth_rad: float
    elevation_rad: float
    radial_velocity_mps: float
    angular_velocity_radps: float
    noise: SensorNoise = SensorNoise()
    timestamp: float = 0.0


@dataclass(frozen=True)
class PassiveDetection:
    node_id: int
    target_id: int  # ground-truth link, scoring only
    bearing_rad: float
    signal_state: int
    snr: float
    timestamp: float = 0.0


def receiver_noise_power(rx: ReceiverParams) -> float:
    """Thermal noise power k T_0 F B in watts."""
    if rx.noise_figure <= 0 or rx.bandwidth_hz <= 0:
        raise ValueError("noise figure and bandwidth must be positive")
    return BOLTZMANN_J_PER_K * REFERENCE_TEMP_K * rx.noise_figure * rx.bandwidth_hz


def passive_snr(
    tx_power_w: float, tx_gain: float, rx: ReceiverParams, range_m: float
) -> float:
    """Linear one-way SNR at the given separation."""
    if range_m <= 0.0:
        raise ZeroRange(f"range must be positive, got {range_m}")
    if tx_power_w <= 0.0:
        raise ValueError("transmit power must be positive")
    noise = receiver_noise_power(rx)
    num = tx_power_w * tx_gain * rx.gain * rx.wavelength_m**2
    den = (4.0 * math.pi * range_m) ** 2 * noise * rx.system_loss
    return num / den


def max_detectable_range(
    tx_power_w: float, tx_gain: float, rx: ReceiverParams, threshold_snr: float = 1.0
) -> float:
    """Range at which the link budget crosses the SNR threshold (default
    0 dB), i.e. the passive detection radius for this emitter."""
    if threshold_snr <= 0.0:
        raise ValueError("threshold must be positive")
    noise = receiver_noise_power(rx)
    return (rx.wavelength_m / (4.0 * math.pi)) * math.sqrt(
        tx_power_w * tx_gain * rx.gain / (noise * rx.system_loss * threshold_snr)
    )


def wrap_angle(theta):
    """Wrap to (-pi, pi]; works on scalars and arrays."""
    return np.arctan2(np.sin(theta), np.cos(theta))


def _spherical(rel: np.ndarray) -> tuple[float, float, float]:
    rng = float(np.linalg.norm(rel))
    az = math.atan2(rel[1], rel[0])
    el = math.asin(rel[2] / rng) if rng > 0 else 0.0
    return rng, az, el


def passive_detect(
    node: "Node",
    target: "Target",
    target_class: "TargetClass",
    mode: NodeMode,
    rng: np.random.Generator,
    noise: SensorNoise = SensorNoise(),
    rx: ReceiverParams = ReceiverParams(),
) -> Optional[PassiveDetection]:
    """Attempt a passive intercept of one target from one node.

    Returns None unless the node is passive, the target is transmitting,
    and the emitter is within its SNR-limited range. The bearing carries
    Gaussian DoA noise; the signal type is truth.
    """
    if mode is not NodeMode.PASSIVE or not target.tx_on:
        return None
    rel = target.position - node.position
    dist = float(np.linalg.norm(rel))
    if dist <= 0.0:
        raise ZeroRange("target colocated with node")
    snr = passive_snr(target_class.tx_power_w, target_class.tx_gain, rx, dist)
    if snr < 1.0:
        return None
    bearing = math.atan2(rel[1], rel[0]) + rng.normal(0.0, noise.sigma_doa_rad)
    return PassiveDetection(
        node_id=node.node_id,
        target_id=target.target_id,
        bearing_rad=float(wrap_angle(bearing)),
        signal_state=target.signal_state,
        snr=snr,
    )


def radar_measure(
    node: "Node",
    target: "Target",
    mode: NodeMode,
    rng: np.random.Generator,
    noise: SensorNoise = SensorNoise(),
    timestamp: float = 0.0,
) -> Optional[RadarMeasurement]:
    """Measure one target with one node's radar.

    Detection is deterministic inside the horizontal range gate. Channels:
    slant range, azimuth, elevation, radial velocity, and the target's
    apparent angular (heading) rate, each with additive Gaussian noise.
    """
    if mode is not NodeMode.ACTIVE:
        return None
    rel = target.position - node.position
    if math.hypot(rel[0], rel[1]) > node.radar_range_m:
        return None
    dist, az, el = _spherical(rel)
    if dist <= 0.0:
        raise ZeroRange("target colocated with node")
    vr = float(np.dot(target.velocity, rel)) / dist
    return RadarMeasurement(
        node_id=node.node_id,
        target_id=target.target_id,
        range_m=dist + rng.normal(0.0, noise.sigma_range_m),
        azimuth_rad=float(wrap_angle(az + rng.normal(0.0, noise.sigma_azimuth_rad))),
        elevation_rad=el + rng.normal(0.0, noise.sigma_elevation_rad),
        radial_velocity_mps=vr + rng.normal(0.0, noise.sigma_radial_velocity),
        angular_velocity_radps=target.heading_rate_radps
        + rng.normal(0.0, noise.sigma_angular_velocity_rad),
        noise=noise,
        timestamp=timestamp,
    )


def nearest_bearing_index(
    bearing_rad: float,
    track_bearings: Sequence[float],
    gate_rad: float = DOA_GATE_RAD,
) -> Optional[int]:
    """Index of the nearest predicted track bearing within the gate, or
    None when nothing gates. Angular differences are wrapped."""
    if len(track_bearings) == 0:
        return None
    diffs = np.abs(wrap_angle(np.asarray(track_bearings, dtype=float) - bearing_rad))
    best = int(np.argmin(diffs))
    if diffs[best] <= gate_rad:
        return best
    return None


def associate_detection(
    detection: PassiveDetection,
    tracks: Sequence,
    node: "Node",
    gate_rad: float = DOA_GATE_RAD,
) -> Optional[int]:
    """Key of the track whose predicted bearing from the node best matches
    the detection, within the gate.

    Ties break on smaller bearing residual, then lower track key, so the
    result does not depend on list order.
    """
    if gate_rad <= 0:
        raise ValueError("gate must be positive")
    best_key = None
    best = (math.inf, math.inf)
    for track in tracks:
        rel = track.state[:2] - node.position[:2]
        bearing = math.atan2(rel[1], rel[0])
        resid = abs(float(wrap_angle(bearing - detection.bearing_rad)))
        if resid <= gate_rad and (resid, track.target_key) < best:
            best = (resid, track.target_key)
            best_key = track.target_key
    return best_key


# --- batched pair evaluation for the simulation loop ---


def radar_measure_batch(
    node_positions: np.ndarray,
    active_mask: np.ndarray,
    radar_range_m: np.ndarray,
    target_positions: np.ndarray,
    target_velocities: np.ndarray,
    heading_rates: np.ndarray,
    rng: np.random.Generator,
    noise: SensorNoise = SensorNoise(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All radar detections for this step.

    Returns (node_idx, target_idx, z) where z has columns [range, azimuth,
    elevation, radial velocity, angular rate], noise included, one row per
    detected pair.
    """
    rel = target_positions[None, :, :] - node_positions[:, None, :]  # (N, M, 3)
    horiz = np.hypot(rel[..., 0], rel[..., 1])
    hit = active_mask[:, None] & (horiz <= radar_range_m[:, None])
    ni, ti = np.nonzero(hit)
    if ni.size == 0:
        return ni, ti, np.empty((0, 5))
    r = rel[ni, ti]
    dist = np.linalg.norm(r, axis=1)
    az = np.arctan2(r[:, 1], r[:, 0])
    el = np.arcsin(np.clip(r[:, 2] / dist, -1.0, 1.0))
    vr = np.einsum("ij,ij->i", target_velocities[ti], r) / dist
    omega = heading_rates[ti]
    z = np.column_stack([dist, az, el, vr, omega])
    sig = np.array(
        [
            noise.sigma_range_m,
            noise.sigma_azimuth_rad,
            noise.sigma_elevation_rad,
            noise.sigma_radial_velocity,
            noise.sigma_angular_velocity_rad,
        ]
    )
    z += rng.normal(0.0, 1.0, z.shape) * sig
    z[:, 1] = wrap_angle(z[:, 1])
    return ni, ti, z


def passive_detect_batch(
    node_positions: np.ndarray,
    passive_mask: np.ndarray,
    target_positions: np.ndarray,
    tx_on: np.ndarray,
    max_range_m: np.ndarray,
    rng: np.random.Generator,
    noise: SensorNoise = SensorNoise(),
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All passive intercepts for this step.

    max_range_m holds each target's precomputed SNR-limited radius.
    Returns (node_idx, target_idx, noisy bearings).
    """
    rel = target_positions[None, :, :] - node_positions[:, None, :]
    dist = np.linalg.norm(rel, axis=2)
    hit = passive_mask[:, None] & tx_on[None, :] & (dist <= max_range_m[None, :])
    ni, ti = np.nonzero(hit)
    if ni.size == 0:
        return ni, ti, np.empty(0)
    r = rel[ni, ti]
    bearing = np.arctan2(r[:, 1], r[:, 0]) + rng.normal(0.0, noise.sigma_doa_rad, ni.size)
    return ni, ti, wrap_angle(bearing)
