"""Track filtering: an interacting-multiple-model Kalman filter per target.

State is [x, y, z, vx, vy, vz]. The model bank holds one filter per motion
state; all share constant-velocity dynamics and differ in process noise
level (a linear coordinated-turn model would need the unknown turn rate,
so turning shows up as elevated process noise plus the angular-rate
evidence used for motion-state inference). Mixing follows the tuning's
mode-transition chain.

Radar polar measurements are fused as converted Cartesian position (with
Jacobian-propagated covariance) plus a linearized radial-velocity row.
The angular-velocity channel never enters the filter; it only weighs the
per-step motion-state inference.

All heavy math lives in array-batched functions over stacked tracks
(leading axis = track, then model); the per-track operations wrap them
with batch size 1. The simulation loop calls the batched forms directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from crnsim.markov import (
    MarkovChain,
    StateSequence,
    transition_matrix_from_counts,
)
from crnsim.scenario import MOTION_STATES, TargetClass

NUM_MODELS = len(MOTION_STATES)

# class-agnostic per-motion-state acceleration noise (m/s^2); the untuned
# filter collapses these to their geometric mean, learned classes use them
# per state
DEFAULT_STATE_ACCEL_STD = np.array([0.5, 5.0, 20.0])

# vertical process noise fraction, mirroring the truth dynamics
VERTICAL_Q_FRACTION = 0.2

# angular-rate evidence densities (rad/s): heading rate near zero for
# cruise, bimodal for turns, broad for high-G
OMEGA_STD_CV = math.radians(2.0)
OMEGA_MEAN_CT = math.radians(15.0)
OMEGA_STD_CT = math.radians(12.0)
OMEGA_STD_HIGHG = math.radians(40.0)

MIN_MODEL_PROB = 1e-12


class InsufficientHistory(ValueError):
    """Operation needs more track updates than available."""


class LengthMismatch(ValueError):
    """History lengths disagree."""


@dataclass(frozen=True)
class FilterTuning:
    """IMM parametrization: mode-transition chain + per-state noise."""

    mode_transition: MarkovChain
    process_noise_per_state: np.ndarray

    def __post_init__(self):
        noise = np.asarray(self.process_noise_per_state, dtype=float)
        if noise.size != self.mode_transition.num_states:
            raise ValueError("one process noise per motion state required")
        if np.any(noise < 0):
            raise ValueError("process noise must be nonnegative")
        object.__setattr__(self, "process_noise_per_state", noise)


def tuned_tuning(cls: TargetClass) -> FilterTuning:
    """Filter matched to a class: its true motion chain and noise levels."""
    return FilterTuning(
        mode_transition=cls.motion_chain,
        process_noise_per_state=np.asarray(cls.process_noise, dtype=float),
    )


def untuned_tuning(num_states: int = NUM_MODELS) -> FilterTuning:
    """Class-agnostic filter: uniform mixing, one shared noise level (the
    geometric mean of the per-state defaults)."""
    shared = float(np.exp(np.mean(np.log(DEFAULT_STATE_ACCEL_STD))))
    uniform = np.full((num_states, num_states), 1.0 / num_states)
    return FilterTuning(
        mode_transition=MarkovChain(uniform, labels=MOTION_STATES[:num_states]),
        process_noise_per_state=np.full(num_states, shared),
    )


@dataclass
class Track:
    """One target's filter bank plus the behavior histories the
    coordinator learns classes from."""

    target_key: int
    model_states: np.ndarray  # (models, 6)
    model_covs: np.ndarray  # (models, 6, 6)
    model_probs: np.ndarray  # (models,)
    last_update: float = 0.0
    num_updates: int = 0
    motion_state_history: list = field(default_factory=list)
    signal_history: list = field(default_factory=list)
    class_assignment: Optional[int] = None
    last_innovation: Optional[np.ndarray] = None
    # step bookkeeping for gap-aware transition counting
    _last_motion_step: int = -10
    _last_signal_step: int = -10
    _motion_counts: np.ndarray = field(
        default_factory=lambda: np.zeros((NUM_MODELS, NUM_MODELS))
    )
    _signal_counts: Optional[np.ndarray] = None

    @property
    def state(self) -> np.ndarray:
        return self.model_probs @ self.model_states

    @property
    def covariance(self) -> np.ndarray:
        dx = self.model_states - self.state
        return np.einsum("m,mij->ij", self.model_probs, self.model_covs) + np.einsum(
            "m,mi,mj->ij", self.model_probs, dx, dx
        )

    def motion_sequence(self, dt: float = 1.0) -> StateSequence:
        return StateSequence(tuple(self.motion_state_history), step_duration=dt)

    def signal_sequence(self, dt: float = 1.0) -> StateSequence:
        return StateSequence(tuple(s for _, s in self.signal_history), step_duration=dt)

    def record_motion_state(self, state: int, step: int) -> None:
        """Append an inferred motion state; adjacent-step pairs feed the
        transition counts."""
        if self.motion_state_history and step == self._last_motion_step + 1:
            self._motion_counts[self.motion_state_history[-1], state] += 1
        self.motion_state_history.append(int(state))
        self._last_motion_step = step

    def record_signal_state(self, signal: int, step: int, num_signal_states: int) -> None:
        """Append an intercepted signal type (at most one per step)."""
        if self._signal_counts is None:
            self._signal_counts = np.zeros((num_signal_states, num_signal_states))
        if self.signal_history:
            if step == self._last_signal_step:
                return
            if step == self._last_signal_step + 1:
                self._signal_counts[self.signal_history[-1][1], signal] += 1
        self.signal_history.append((step, int(signal)))
        self._last_signal_step = step

    def estimated_motion_distribution(self) -> Optional[np.ndarray]:
        if not self.motion_state_history:
            return None
        counts = np.bincount(self.motion_state_history, minlength=NUM_MODELS)
        return counts / counts.sum()

    def estimated_signal_distribution(self, num_signal_states: int) -> Optional[np.ndarray]:
        if not self.signal_history:
            return None
        counts = np.bincount(
            [s for _, s in self.signal_history], minlength=num_signal_states
        )
        return counts / counts.sum()

    def estimated_motion_matrix(self, smoothing: float = 1.0) -> np.ndarray:
        return transition_matrix_from_counts(self._motion_counts, smoothing)

    def estimated_signal_matrix(
        self, num_signal_states: int, smoothing: float = 1.0
    ) -> np.ndarray:
        counts = (
            self._signal_counts
            if self._signal_counts is not None
            else np.zeros((num_signal_states, num_signal_states))
        )
        return transition_matrix_from_counts(counts, smoothing)

    def motion_row_counts(self) -> np.ndarray:
        return self._motion_counts.sum(axis=1)

    def signal_row_counts(self, num_signal_states: int) -> np.ndarray:
        if self._signal_counts is None:
            return np.zeros(num_signal_states)
        return self._signal_counts.sum(axis=1)


# --- batched array core ---


def cv_transition(dt: float) -> np.ndarray:
    """Constant-velocity transition for [x,y,z,vx,vy,vz]."""
    F = np.eye(6)
    F[0, 3] = F[1, 4] = F[2, 5] = dt
    return F


def process_noise_matrix(dt: float, accel_std: float) -> np.ndarray:
    """Discrete white-noise-acceleration Q; the vertical axis gets the
    scaled-down noise the truth dynamics use."""
    q = np.zeros((6, 6))
    var = np.array([1.0, 1.0, VERTICAL_Q_FRACTION**2]) * accel_std**2
    for ax in range(3):
        q[ax, ax] = var[ax] * dt**4 / 4.0
        q[ax, ax + 3] = q[ax + 3, ax] = var[ax] * dt**3 / 2.0
        q[ax + 3, ax + 3] = var[ax] * dt**2
    return q


def imm_mix(
    states: np.ndarray, covs: np.ndarray, probs: np.ndarray, trans: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IMM mixing step over stacked tracks.

    states (B,M,6), covs (B,M,6,6), probs (B,M), trans (B,M,M)
    row-stochastic per track. Returns mixed states/covs and the predicted
    model probabilities.
    """
    c = np.einsum("bi,bij->bj", probs, trans)  # (B, M) predicted model probs
    c = np.maximum(c, MIN_MODEL_PROB)
    # w[b,i,j] = trans[b,i,j] * probs[b,i] / c[b,j]
    w = trans * probs[:, :, None] / c[:, None, :]
    mixed = np.einsum("bij,bik->bjk", w, states)  # (B, M, 6)
    dx = states[:, :, None, :] - mixed[:, None, :, :]  # (B, i, j, 6)
    mixed_cov = np.einsum("bij,bikl->bjkl", w, covs) + np.einsum(
        "bij,bijk,bijl->bjkl", w, dx, dx
    )
    return mixed, mixed_cov, c


def imm_predict_arrays(
    states: np.ndarray,
    covs: np.ndarray,
    probs: np.ndarray,
    trans: np.ndarray,
    F: np.ndarray,
    Q: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mix then linearly propagate every model of every track.

    F is (6,6) shared; trans is (B,M,M) and Q (B,M,6,6) per track (tracks
    may carry different tunings). Returns (states, covs, probs) after
    prediction.
    """
    mixed, mixed_cov, c = imm_mix(states, covs, probs, trans)
    pred = np.einsum("ij,bmj->bmi", F, mixed)
    pred_cov = np.einsum("ij,bmjk,lk->bmil", F, mixed_cov, F) + Q
    return pred, _symmetrize(pred_cov), c


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


def polar_to_cartesian(
    range_m, azimuth_rad, elevation_rad, node_position, sigmas
) -> tuple[np.ndarray, np.ndarray]:
    """Convert polar measurements to Cartesian positions with
    first-order-propagated covariance.

    Accepts scalars or batched arrays (K,); node_position is (3,) or
    (K,3); sigmas = (sigma_r, sigma_az, sigma_el). Returns (K,3) positions
    and (K,3,3) covariances (squeezed when scalar input).
    """
    r = np.atleast_1d(np.asarray(range_m, dtype=float))
    az = np.atleast_1d(np.asarray(azimuth_rad, dtype=float))
    el = np.atleast_1d(np.asarray(elevation_rad, dtype=float))
    npos = np.atleast_2d(np.asarray(node_position, dtype=float))
    ca, sa = np.cos(az), np.sin(az)
    ce, se = np.cos(el), np.sin(el)
    offset = np.stack([r * ce * ca, r * ce * sa, r * se], axis=-1)
    pos = npos + offset
    # Jacobian wrt (r, az, el), shape (K, 3, 3)
    J = np.empty((r.size, 3, 3))
    J[:, 0, 0] = ce * ca
    J[:, 0, 1] = -r * ce * sa
    J[:, 0, 2] = -r * se * ca
    J[:, 1, 0] = ce * sa
    J[:, 1, 1] = r * ce * ca
    J[:, 1, 2] = -r * se * sa
    J[:, 2, 0] = se
    J[:, 2, 1] = 0.0
    J[:, 2, 2] = r * ce
    S = np.diag(np.asarray(sigmas, dtype=float) ** 2)
    R = np.einsum("kij,jl,kml->kim", J, S, J)
    if np.isscalar(range_m) or np.asarray(range_m).ndim == 0:
        return pos[0], R[0]
    return pos, R


def measurement_rows(
    states: np.ndarray, node_positions: np.ndarray
) -> np.ndarray:
    """H matrices (K,4,6) for a position + radial-velocity measurement,
    linearized at each track's current combined position estimate."""
    K = states.shape[0]
    H = np.zeros((K, 4, 6))
    H[:, 0, 0] = H[:, 1, 1] = H[:, 2, 2] = 1.0
    los = states[:, :3] - node_positions
    dist = np.linalg.norm(los, axis=1, keepdims=True)
    dist = np.maximum(dist, 1e-6)
    H[:, 3, 3:] = los / dist
    return H


def kalman_update_arrays(
    states: np.ndarray,
    covs: np.ndarray,
    probs: np.ndarray,
    z: np.ndarray,
    R: np.ndarray,
    H: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Joseph-form Kalman update of every model of every stacked track,
    with the IMM model-probability reweighting.

    states (B,M,6), covs (B,M,6,6), probs (B,M), z (B,4), R (B,4,4),
    H (B,4,6). Returns updated (states, covs, probs, innovations).
    """
    B, M, n = states.shape
    d = z.shape[1]
    zhat = np.einsum("bij,bmj->bmi", H, states)
    nu = z[:, None, :] - zhat  # (B, M, d)
    PHt = np.einsum("bmij,bkj->bmik", covs, H)  # (B, M, 6, d)
    S = np.einsum("bki,bmij->bmkj", H, PHt) + R[:, None, :, :]
    S = _symmetrize(S)
    Sinv = np.linalg.inv(S)
    K = np.einsum("bmik,bmkj->bmij", PHt, Sinv)  # (B, M, 6, d)
    states_new = states + np.einsum("bmij,bmj->bmi", K, nu)
    IKH = np.eye(n)[None, None] - np.einsum("bmij,bjk->bmik", K, H)
    covs_new = np.einsum("bmij,bmjk,bmlk->bmil", IKH, covs, IKH) + np.einsum(
        "bmij,bjk,bmlk->bmil", K, R, K
    )
    covs_new = _symmetrize(covs_new)
    # model likelihoods -> probability reweighting (log space for safety)
    maha = np.einsum("bmi,bmij,bmj->bm", nu, Sinv, nu)
    _, logdet = np.linalg.slogdet(S)
    loglik = -0.5 * (maha + logdet + d * math.log(2.0 * math.pi))
    logw = np.log(np.maximum(probs, MIN_MODEL_PROB)) + loglik
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    probs_new = w / w.sum(axis=1, keepdims=True)
    mean_innovation = np.einsum("bm,bmi->bi", probs_new, nu)
    return states_new, covs_new, probs_new, mean_innovation


# --- per-track operations ---


def start_track(
    target_key: int,
    pos1: np.ndarray,
    R1: np.ndarray,
    pos2: np.ndarray,
    R2: np.ndarray,
    dt: float,
    timestamp: float = 0.0,
) -> Track:
    """Two-point differencing initialization from the first two converted
    position measurements (dt apart)."""
    if dt <= 0:
        raise ValueError("measurements must be time-separated")
    state = np.concatenate([pos2, (pos2 - pos1) / dt])
    P = np.zeros((6, 6))
    P[:3, :3] = R2
    P[:3, 3:] = P[3:, :3] = R2 / dt
    P[3:, 3:] = (R1 + R2) / dt**2
    return Track(
        target_key=target_key,
        model_states=np.tile(state, (NUM_MODELS, 1)),
        model_covs=np.tile(P, (NUM_MODELS, 1, 1)),
        model_probs=np.full(NUM_MODELS, 1.0 / NUM_MODELS),
        last_update=timestamp,
        num_updates=2,
    )


def imm_predict(track: Track, tuning: FilterTuning, dt: float) -> Track:
    """Advance one track by dt under the tuning's model bank."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    F = cv_transition(dt)
    Q = np.stack(
        [process_noise_matrix(dt, s) for s in tuning.process_noise_per_state]
    )
    states, covs, probs = imm_predict_arrays(
        track.model_states[None],
        track.model_covs[None],
        track.model_probs[None],
        tuning.mode_transition.transition[None],
        F,
        Q[None],
    )
    track.model_states, track.model_covs, track.model_probs = (
        states[0],
        covs[0],
        probs[0],
    )
    return track


def kalman_update(track: Track, meas, node) -> Track:
    """Fuse one radar measurement (converted position + radial velocity)."""
    sig = meas.noise
    pos, R3 = polar_to_cartesian(
        meas.range_m,
        meas.azimuth_rad,
        meas.elevation_rad,
        node.position,
        (sig.sigma_range_m, sig.sigma_azimuth_rad, sig.sigma_elevation_rad),
    )
    z = np.concatenate([pos, [meas.radial_velocity_mps]])
    R = np.zeros((4, 4))
    R[:3, :3] = R3
    R[3, 3] = max(sig.sigma_radial_velocity, 1e-6) ** 2
    H = measurement_rows(track.state[None], np.asarray(node.position)[None])
    states, covs, probs, innov = kalman_update_arrays(
        track.model_states[None],
        track.model_covs[None],
        track.model_probs[None],
        z[None],
        R[None],
        H,
    )
    track.model_states, track.model_covs, track.model_probs = (
        states[0],
        covs[0],
        probs[0],
    )
    track.last_innovation = innov[0]
    track.num_updates += 1
    track.last_update = meas.timestamp
    return track


def omega_log_evidence(omega: np.ndarray) -> np.ndarray:
    """Log density of measured angular rates under each motion model.

    omega (K,) -> (K, NUM_MODELS). Cruise concentrates near zero, turns are
    bimodal around +/- the typical rate, high-G is broad.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=float))[:, None]

    def log_n(x, mu, std):
        return -0.5 * ((x - mu) / std) ** 2 - math.log(std * math.sqrt(2 * math.pi))

    cv = log_n(w, 0.0, OMEGA_STD_CV)
    ct = np.logaddexp(
        log_n(w, OMEGA_MEAN_CT, OMEGA_STD_CT), log_n(w, -OMEGA_MEAN_CT, OMEGA_STD_CT)
    ) - math.log(2.0)
    hg = log_n(w, 0.0, OMEGA_STD_HIGHG)
    return np.concatenate([cv, ct, hg], axis=1)


def motion_state_posterior(
    track: Track, measured_omegas: Sequence[float] = ()
) -> np.ndarray:
    """Per-model posterior for this step: the IMM model probabilities
    weighted by angular-rate evidence when the radar measured any. The
    filter's own probabilities are left untouched."""
    if track.num_updates < 2:
        raise InsufficientHistory(f"track {track.target_key} has too few updates")
    log_post = np.log(np.maximum(track.model_probs, MIN_MODEL_PROB))
    if len(measured_omegas) > 0:
        log_post = log_post + omega_log_evidence(np.asarray(measured_omegas)).sum(
            axis=0
        )
    log_post -= log_post.max()
    post = np.exp(log_post)
    return post / post.sum()


def infer_motion_state(
    track: Track, measured_omegas: Sequence[float] = (), step: Optional[int] = None
) -> int:
    """Most probable motion model this step.

    When a step index is given the inferred state is appended to the
    track's motion history (adjacent steps feed the transition counts).
    """
    state = int(np.argmax(motion_state_posterior(track, measured_omegas)))
    if step is not None:
        track.record_motion_state(state, step)
    return state


def track_rmse(
    estimated_positions: Sequence[np.ndarray], truth_positions: Sequence[np.ndarray]
) -> float:
    """Root-mean-square 3D position error over aligned histories."""
    if len(estimated_positions) != len(truth_positions):
        raise LengthMismatch(
            f"{len(estimated_positions)} estimates vs {len(truth_positions)} truths"
        )
    if len(estimated_positions) == 0:
        raise LengthMismatch("empty histories")
    est = np.asarray(estimated_positions, dtype=float)
    tru = np.asarray(truth_positions, dtype=float)
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=1))))
