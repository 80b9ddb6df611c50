"""End-of-epoch class learning over per-target parameter estimates.

Each observed target contributes a ParameterVector: its estimated
stationary distributions over motion states and signal types (primary
blocks) plus the rows of the estimated transition matrices (half-weight
blocks — stationary behavior defines a class, transition structure only
helps separate classes that happen to share it). Vectors are clustered
by k-means under a summed Jensen-Shannon divergence, the cluster count
is chosen by AIC, and the resulting classes persist across epochs: each
update re-clusters the cumulative pool and keeps ids stable by matching
new centroids to old ones.

A learned class carries enough structure to tune a filter bank: its
centroid's motion-transition rows become the IMM mixing chain, with the
per-state default acceleration levels standing in for process noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp, xlogy

from crnsim.markov import (
    MarkovChain,
    stationary_distribution,
    transition_matrix_from_counts,
)
from crnsim.tracking import DEFAULT_STATE_ACCEL_STD, FilterTuning

LIBRARY_FORMAT_VERSION = 1
DEFAULT_ACCEPT_RADIUS = 0.25
DEFAULT_MAX_CLASSES = 6
KMEANS_MAX_ITER = 100
KMEANS_RESTARTS = 10
TRANSITION_BLOCK_WEIGHT = 0.5

_LN2 = math.log(2.0)
_BLOCK_SUM_TOL = 1e-6


class BlockMismatch(ValueError):
    """Parameter vectors with different block structures were combined."""


class TooFewPoints(ValueError):
    """More clusters requested than vectors available."""


@dataclass(frozen=True)
class BlockSpec:
    """One distribution block inside a ParameterVector."""

    name: str
    length: int
    weight: float = 1.0
    group: str = "motion"  # which history's sample count backs this block


def family_blocks(
    num_motion_states: int = 3, num_signal_states: int = 4
) -> tuple[BlockSpec, ...]:
    """Block layout shared by every vector of a single-family environment."""
    v, s = num_motion_states, num_signal_states
    blocks = [
        BlockSpec("pi_v", v, 1.0, "motion"),
        BlockSpec("pi_s", s, 1.0, "signal"),
    ]
    blocks += [
        BlockSpec(f"P_v_row{i}", v, TRANSITION_BLOCK_WEIGHT, "motion")
        for i in range(v)
    ]
    blocks += [
        BlockSpec(f"P_s_row{i}", s, TRANSITION_BLOCK_WEIGHT, "signal")
        for i in range(s)
    ]
    return tuple(blocks)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Concatenated distribution blocks describing one target's behavior.

    n_eff maps a block name (or, as a fallback, a block group) to the
    effective sample size behind its estimate — time steps observed for a
    stationary block, visits to the source state for a transition row. It
    scales the AIC likelihood, so unobserved rows carry no evidence.
    """

    values: np.ndarray
    blocks: tuple[BlockSpec, ...]
    n_eff: dict

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        total = sum(b.length for b in self.blocks)
        if vals.shape != (total,):
            raise BlockMismatch(
                f"expected {total} values for the block structure, got {vals.shape}"
            )
        if np.any(vals < -1e-12):
            raise ValueError("distribution entries must be nonnegative")
        for b, sl in _block_slices(self.blocks):
            if abs(vals[sl].sum() - 1.0) > _BLOCK_SUM_TOL:
                raise ValueError(f"block {b.name} does not sum to 1")
        object.__setattr__(self, "values", vals)


def _block_slices(blocks):
    offset = 0
    for b in blocks:
        yield b, slice(offset, offset + b.length)
        offset += b.length


def block_values(vector: ParameterVector, name: str) -> np.ndarray:
    """One named block of the concatenated vector (read-only view)."""
    for spec, sl in _block_slices(vector.blocks):
        if spec.name == name:
            return vector.values[sl]
    raise KeyError(name)


def make_parameter_vector(
    pi_v: np.ndarray,
    P_v: np.ndarray,
    pi_s: np.ndarray,
    P_s: np.ndarray,
    n_motion: float,
    n_signal: float,
    motion_row_counts=None,
    signal_row_counts=None,
) -> ParameterVector:
    """Assemble the standard vector from one target's estimates.

    Row counts, when given, record how many transitions back each
    transition-matrix row (AIC evidence weighting)."""
    pi_v = np.asarray(pi_v, dtype=float)
    pi_s = np.asarray(pi_s, dtype=float)
    P_v = np.asarray(P_v, dtype=float)
    P_s = np.asarray(P_s, dtype=float)
    values = np.concatenate([pi_v, pi_s, P_v.ravel(), P_s.ravel()])
    n_eff = {"motion": float(n_motion), "signal": float(n_signal)}
    if motion_row_counts is not None:
        for i, c in enumerate(motion_row_counts):
            n_eff[f"P_v_row{i}"] = float(c)
    if signal_row_counts is not None:
        for i, c in enumerate(signal_row_counts):
            n_eff[f"P_s_row{i}"] = float(c)
    return ParameterVector(
        values=values,
        blocks=family_blocks(pi_v.size, pi_s.size),
        n_eff=n_eff,
    )


def class_parameter_vector(cls) -> ParameterVector:
    """The exact vector a perfectly-observed member of a class would have."""
    pi_v = stationary_distribution(cls.motion_chain)
    pi_s = stationary_distribution(cls.signal_chain)
    return make_parameter_vector(
        pi_v, cls.motion_chain.transition, pi_s, cls.signal_chain.transition,
        n_motion=1.0, n_signal=1.0,
    )


def occupancy_sample_size(n_steps: float, occupancy, transition) -> float:
    """Effective number of independent draws behind an occupancy estimate.

    A persistent chain revisits its current state, so n_steps observations
    carry far less evidence about the stationary distribution than n_steps
    iid draws would; pretending otherwise makes the AIC likelihood read
    ordinary between-target scatter as class structure. Discounts by the
    mean self-transition probability rho: n * (1 - rho) / (1 + rho).

    rho is deliberately the raw self-transition mass, not the excess over
    chance agreement: the overshoot (an iid chain already gets rho > 0)
    doubles as slack for the cross-correlation between the occupancy and
    transition-row estimates, which all come from the same short path.
    """
    if n_steps <= 0:
        return 0.0
    occupancy = np.asarray(occupancy, dtype=float)
    rho = float(np.sum(occupancy * np.diag(np.asarray(transition, dtype=float))))
    return float(n_steps) * (1.0 - rho) / (1.0 + rho)


def vector_from_paths(
    motion_path,
    signal_path,
    num_motion_states: int,
    num_signal_states: int,
    smoothing: float = 1.0,
) -> ParameterVector:
    """Build one target's vector from its observed state sequences."""
    motion_path = np.asarray(motion_path, dtype=np.int64)
    signal_path = np.asarray(signal_path, dtype=np.int64)
    pi_v = np.bincount(motion_path, minlength=num_motion_states) / motion_path.size
    pi_s = np.bincount(signal_path, minlength=num_signal_states) / signal_path.size
    mc = np.zeros((num_motion_states, num_motion_states))
    np.add.at(mc, (motion_path[:-1], motion_path[1:]), 1.0)
    sc = np.zeros((num_signal_states, num_signal_states))
    np.add.at(sc, (signal_path[:-1], signal_path[1:]), 1.0)
    P_v = transition_matrix_from_counts(mc, smoothing)
    P_s = transition_matrix_from_counts(sc, smoothing)
    return make_parameter_vector(
        pi_v, P_v, pi_s, P_s,
        occupancy_sample_size(motion_path.size, pi_v, P_v),
        occupancy_sample_size(signal_path.size, pi_s, P_s),
        motion_row_counts=mc.sum(axis=1),
        signal_row_counts=sc.sum(axis=1),
    )


# --- distance ---


def _entropy_bits(p: np.ndarray) -> np.ndarray:
    return -xlogy(p, p).sum(axis=-1) / _LN2


def _jsd_bits(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Base-2 Jensen-Shannon divergence along the last axis; in [0, 1]."""
    m = 0.5 * (p + q)
    return np.maximum(
        _entropy_bits(m) - 0.5 * _entropy_bits(p) - 0.5 * _entropy_bits(q), 0.0
    )


def distribution_distance(a: ParameterVector, b: ParameterVector) -> float:
    """Weighted sum of per-block JSD between two parameter vectors."""
    if a.blocks != b.blocks:
        raise BlockMismatch("parameter vectors have different block structures")
    total = 0.0
    for spec, sl in _block_slices(a.blocks):
        total += spec.weight * float(_jsd_bits(a.values[sl], b.values[sl]))
    return total


def _stack(vectors: Sequence[ParameterVector]) -> np.ndarray:
    blocks = vectors[0].blocks
    for v in vectors[1:]:
        if v.blocks != blocks:
            raise BlockMismatch("vectors in one pool must share block structure")
    return np.stack([v.values for v in vectors])


def _distance_matrix(
    points: np.ndarray, centroids: np.ndarray, blocks
) -> np.ndarray:
    """Weighted JSD between every point (N,L) and centroid (K,L): (N,K)."""
    out = np.zeros((points.shape[0], centroids.shape[0]))
    for spec, sl in _block_slices(blocks):
        out += spec.weight * _jsd_bits(
            points[:, None, sl], centroids[None, :, sl]
        )
    return out


# --- clustering ---


def _lloyd(points: np.ndarray, k: int, blocks, rng) -> tuple[np.ndarray, np.ndarray, float, list]:
    n = points.shape[0]
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    assign = np.full(n, -1)
    objective_trace = []
    for _ in range(KMEANS_MAX_ITER):
        dists = _distance_matrix(points, centroids, blocks)
        new_assign = np.argmin(dists, axis=1)
        objective_trace.append(float(dists[np.arange(n), new_assign].sum()))
        for c in range(k):
            members = new_assign == c
            if members.any():
                centroids[c] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster with the worst-fit point
                worst = int(np.argmax(dists[np.arange(n), new_assign]))
                centroids[c] = points[worst]
                new_assign[worst] = c
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    dists = _distance_matrix(points, centroids, blocks)
    objective = float(dists[np.arange(n), assign].sum())
    return assign, centroids, objective, objective_trace


def kmeans_distributions(
    vectors: Sequence[ParameterVector], k: int, rng
) -> tuple[np.ndarray, list[ParameterVector]]:
    """Lloyd k-means under distribution_distance, best of 10 restarts.

    Returns (assignments, centroids); centroids are blockwise means, so
    they remain valid distributions.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(vectors):
        raise TooFewPoints(f"k={k} exceeds {len(vectors)} vectors")
    points = _stack(vectors)
    blocks = vectors[0].blocks
    best = None
    for _ in range(KMEANS_RESTARTS):
        assign, cents, objective, _ = _lloyd(points, k, blocks, rng)
        if best is None or objective < best[2]:
            best = (assign, cents, objective)
    assign, cents, _ = best
    mean_n_eff = {
        g: float(np.mean([v.n_eff.get(g, 0.0) for v in vectors]))
        for g in ("motion", "signal")
    }
    centroids = [
        ParameterVector(values=c, blocks=blocks, n_eff=dict(mean_n_eff))
        for c in cents
    ]
    return assign, centroids


def _mixture_logits(
    points: np.ndarray,
    n_eff: np.ndarray,
    centroids: np.ndarray,
    weights: np.ndarray,
    blocks,
) -> np.ndarray:
    """Per-member, per-component joint log-density (N, K): mixing weight plus
    every block scored as a categorical sample of the member's effective
    size under the component centroid."""
    logc = np.log(np.maximum(centroids, 1e-12))
    logits = np.zeros((points.shape[0], centroids.shape[0]))
    for gi, (spec, sl) in enumerate(_block_slices(blocks)):
        logits += n_eff[:, gi, None] * (points[:, None, sl] * logc[None, :, sl]).sum(
            axis=2
        )
    with np.errstate(divide="ignore"):
        logits += np.log(weights)[None, :]
    return logits


def _pool_log_likelihood(
    points: np.ndarray,
    n_eff: np.ndarray,
    assign: np.ndarray,
    centroids: np.ndarray,
    blocks,
    max_iter: int = 50,
    tol: float = 1e-6,
) -> float:
    """Mixture log-likelihood of the pool, EM-polished from the k-means fit.

    Scoring the hard k-means quantisation directly is useless for model
    order selection: splitting one class along its sampling noise moves
    every member a little closer to a sub-centroid, so the assigned-centroid
    likelihood grows linearly with pool size and swamps any fixed AIC
    penalty.  Running EM from the k-means solution lets redundant
    sub-components re-broaden (soft responsibilities wash the split out),
    while genuinely distinct classes keep near-hard memberships, so only
    real structure earns likelihood."""
    k = centroids.shape[0]
    n = points.shape[0]
    weights = np.bincount(assign, minlength=k).astype(float) / n
    cents = centroids.copy()
    prev = -np.inf
    for _ in range(max_iter):
        logits = _mixture_logits(points, n_eff, cents, weights, blocks)
        norm = logsumexp(logits, axis=1)
        logl = float(norm.sum())
        if logl - prev < tol * max(1.0, abs(logl)):
            return max(logl, prev)
        prev = logl
        resp = np.exp(logits - norm[:, None])
        weights = resp.mean(axis=0)
        for gi, (spec, sl) in enumerate(_block_slices(blocks)):
            mass = resp * n_eff[:, gi, None]          # (N, K)
            denom = mass.sum(axis=0)                  # (K,)
            alive = denom > 1e-12
            new = mass.T @ points[:, sl]              # (K, len)
            cents[alive, sl] = new[alive] / denom[alive, None]
    return prev


def _n_eff_for(vector: ParameterVector, block: BlockSpec) -> float:
    return float(vector.n_eff.get(block.name, vector.n_eff.get(block.group, 0.0)))


def _fit_pool(vectors: Sequence[ParameterVector], k_max: int, rng):
    """k-means fits for k=1..k_max; returns the AIC winner (ties favor
    smaller k)."""
    if not vectors:
        raise TooFewPoints("no vectors to cluster")
    points = _stack(vectors)
    blocks = vectors[0].blocks
    d = sum(b.length - 1 for b in blocks)
    n_eff = np.array(
        [[_n_eff_for(v, b) for b, _ in _block_slices(blocks)] for v in vectors]
    )
    best = None
    for k in range(1, min(k_max, len(vectors)) + 1):
        assign, centroids = kmeans_distributions(vectors, k, rng)
        cents = np.stack([c.values for c in centroids])
        logl = _pool_log_likelihood(points, n_eff, assign, cents, blocks)
        aic = 2.0 * k * d - 2.0 * logl
        if best is None or aic < best[0]:
            best = (aic, k, assign, centroids)
    return best


def select_k_aic(
    vectors: Sequence[ParameterVector], k_max: int = DEFAULT_MAX_CLASSES, rng=None
) -> int:
    """Cluster count minimizing AIC = 2kd - 2 logL over k = 1..k_max."""
    if rng is None:
        rng = np.random.default_rng()
    return _fit_pool(vectors, k_max, rng)[1]


# --- the library ---


@dataclass(eq=False)
class LearnedClass:
    """One discovered class: centroid behavior plus filter tuning."""

    class_id: int
    centroid: ParameterVector
    member_count: int

    def tuning(self) -> FilterTuning:
        """IMM tuning from the centroid: its motion-transition rows mix the
        models, per-state default acceleration stands in for noise."""
        rows = [
            self.centroid.values[sl]
            for spec, sl in _block_slices(self.centroid.blocks)
            if spec.name.startswith("P_v_row")
        ]
        P = np.stack(rows)
        P = P / P.sum(axis=1, keepdims=True)
        return FilterTuning(
            mode_transition=MarkovChain(P),
            process_noise_per_state=DEFAULT_STATE_ACCEL_STD[: P.shape[0]].copy(),
        )


@dataclass
class ClassLibrary:
    """Classes learned so far plus per-epoch accuracy records."""

    classes: list = field(default_factory=list)
    epoch_history: list = field(default_factory=list)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if len(ids) != len(set(ids)):
            raise ValueError("class ids must be unique")

    def get(self, class_id: int) -> Optional[LearnedClass]:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        return None


def _greedy_id_match(
    new_centroids: list[ParameterVector], old_classes: list
) -> dict[int, int]:
    """Map new-cluster index -> stable class id, nearest-centroid-first."""
    mapping: dict[int, int] = {}
    if old_classes:
        pairs = []
        for i, cent in enumerate(new_centroids):
            for old in old_classes:
                pairs.append((distribution_distance(cent, old.centroid), i, old.class_id))
        used_old: set = set()
        for _, i, old_id in sorted(pairs, key=lambda p: p[0]):
            if i in mapping or old_id in used_old:
                continue
            mapping[i] = old_id
            used_old.add(old_id)
    next_id = max((c.class_id for c in old_classes), default=-1) + 1
    for i in range(len(new_centroids)):
        if i not in mapping:
            mapping[i] = next_id
            next_id += 1
    return mapping


def update_library(
    library: ClassLibrary,
    pool: Sequence[ParameterVector],
    rng,
    k_max: int = DEFAULT_MAX_CLASSES,
) -> tuple[ClassLibrary, np.ndarray]:
    """Re-cluster the cumulative vector pool and rebuild the class set.

    Returns the new library plus each pool vector's assigned class id
    (aligned with `pool`), which callers use to score the epoch.
    """
    _, k, assign, centroids = _fit_pool(pool, k_max, rng)
    mapping = _greedy_id_match(centroids, library.classes)
    classes = [
        LearnedClass(
            class_id=mapping[i],
            centroid=centroids[i],
            member_count=int(np.sum(assign == i)),
        )
        for i in range(k)
    ]
    classes.sort(key=lambda c: c.class_id)
    new_library = ClassLibrary(
        classes=classes, epoch_history=list(library.epoch_history)
    )
    assigned_ids = np.array([mapping[int(a)] for a in assign])
    return new_library, assigned_ids


def assign_class(
    library: ClassLibrary,
    vector: ParameterVector,
    accept_radius: float = DEFAULT_ACCEPT_RADIUS,
) -> Optional[int]:
    """Nearest learned class within the acceptance radius, else None."""
    best_id, best_dist = None, np.inf
    for c in library.classes:
        dist = distribution_distance(vector, c.centroid)
        if dist < best_dist:
            best_id, best_dist = c.class_id, dist
    if best_id is None or best_dist > accept_radius:
        return None
    return best_id


def score_classes(
    library: ClassLibrary,
    assigned_ids: Sequence,
    true_ids: Sequence,
) -> tuple[float, float]:
    """Formation and association accuracy for one epoch.

    Formation compares the learned class count against the true count
    with linear partial credit. Association is the fraction of targets
    whose learned class maps to their true class under the best
    one-to-one matching of learned to true classes.
    """
    if len(assigned_ids) != len(true_ids):
        raise ValueError("assigned and true id lists must align")
    true_labels = sorted(set(true_ids))
    k_true = len(true_labels)
    k_hat = len(library.classes)
    formation = max(0.0, 1.0 - abs(k_hat - k_true) / k_true)

    learned_labels = sorted({a for a in assigned_ids if a is not None})
    if not learned_labels:
        return formation, 0.0
    confusion = np.zeros((k_true, len(learned_labels)))
    t_index = {t: i for i, t in enumerate(true_labels)}
    l_index = {l: j for j, l in enumerate(learned_labels)}
    for a, t in zip(assigned_ids, true_ids):
        if a is not None:
            confusion[t_index[t], l_index[a]] += 1
    rows, cols = linear_sum_assignment(-confusion)
    association = float(confusion[rows, cols].sum()) / len(true_ids)
    return formation, association


# --- persistence ---


def save_library(library: ClassLibrary, path) -> None:
    doc = {
        "version": LIBRARY_FORMAT_VERSION,
        "blocks": [],
        "classes": [],
    }
    if library.classes:
        doc["blocks"] = [
            {"name": b.name, "length": b.length}
            for b in library.classes[0].centroid.blocks
        ]
    for c in library.classes:
        doc["classes"].append(
            {
                "id": c.class_id,
                "centroid": [float(x) for x in c.centroid.values],
                "member_count": c.member_count,
            }
        )
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def _block_from_name(name: str, length: int) -> BlockSpec:
    weight = 1.0 if name.startswith("pi_") else TRANSITION_BLOCK_WEIGHT
    group = "signal" if name.rstrip("0123456789").endswith(("_s", "_s_row")) else "motion"
    return BlockSpec(name, length, weight, group)


def load_library(path) -> ClassLibrary:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != LIBRARY_FORMAT_VERSION:
        raise ValueError(f"unsupported library version {doc.get('version')!r}")
    blocks = tuple(
        _block_from_name(b["name"], int(b["length"])) for b in doc["blocks"]
    )
    classes = []
    for c in doc["classes"]:
        centroid = ParameterVector(
            values=np.asarray(c["centroid"], dtype=float),
            blocks=blocks,
            n_eff={"motion": 1.0, "signal": 1.0},
        )
        classes.append(
            LearnedClass(
                class_id=int(c["id"]),
                centroid=centroid,
                member_count=int(c["member_count"]),
            )
        )
    return ClassLibrary(classes=classes)
