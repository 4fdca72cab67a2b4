"""Implicit-class discovery.

Confident target candidates are picked per pseudo-class by entropy, their
features are clustered for a range of cluster counts, and the count is
chosen from two signals: clustering accuracy against the known-class
pseudo-labels and the knee of the SSE curve.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import net
from .errors import ContractError
from .losses import row_entropies
from .numkit import Rng, apply_pca, as_matrix, fit_pca

log = logging.getLogger(__name__)


class EmptyUnknownError(RuntimeError):
    """No target sample is currently predicted as an implicit class."""


@dataclass
class CandidateSets:
    kn_index: np.ndarray
    kn_labels: np.ndarray  # pseudo-labels in [0, num_known)
    kn_features: np.ndarray
    im_index: np.ndarray
    im_labels: np.ndarray  # previous discovered-class labels, >= num_known
    im_features: np.ndarray
    num_known: int

    @property
    def features(self) -> np.ndarray:
        return np.vstack([self.kn_features, self.im_features])


@dataclass
class Clustering:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    sse: float
    n_iter: int = 0
    sse_trace: list = field(default_factory=list)


@dataclass
class KEstimate:
    k_ca: int
    k_elbow: int
    k_hat: int
    k_star: int
    sweep: list  # [(k_total, sse, ca), ...]
    elbow_fallback: bool = False
    no_update: bool = False


@dataclass
class DiscoveryResult:
    k_star: int
    pseudo_classes: list  # one index array per discovered class (target indices)
    im_index: np.ndarray
    im_labels: np.ndarray  # num_known .. num_known + k_star - 1
    clamped: bool = False


def half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def lowest_entropy_half(labels, entropies, classes) -> dict:
    """Per class, the ``ceil(n/2)`` members with the lowest entropy (stable on ties)."""
    out = {}
    for cls in classes:
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            log.info("pseudo-class %d is empty", cls)
            continue
        keep = math.ceil(members.size / 2)
        order = np.argsort(entropies[members], kind="stable")
        out[cls] = np.sort(members[order[:keep]])
    return out


def select_candidates(f, c, x_target, pca_dim: int | None = None) -> CandidateSets:
    """Split confident target samples into known and implicit candidate sets.

    Features used later for clustering are F outputs projected on their top
    ``pca_dim`` principal directions (no projection when ``pca_dim`` is None).
    """
    feats, probs, _ = net.forward(f, c, x_target)
    labels = np.argmax(probs, axis=1)
    ent = row_entropies(probs)
    picked = lowest_entropy_half(labels, ent, range(c.out_dim))
    nk = c.num_known
    kn = [picked[j] for j in range(nk) if j in picked]
    im = [picked[j] for j in range(nk, c.out_dim) if j in picked]
    kn_idx = np.concatenate(kn) if kn else np.zeros(0, dtype=np.int64)
    im_idx = np.concatenate(im) if im else np.zeros(0, dtype=np.int64)

    both = np.concatenate([kn_idx, im_idx])
    z = feats[both]
    if pca_dim is not None and len(both) >= 2:
        d = min(pca_dim, feats.shape[1], len(both) - 1)
        z = apply_pca(fit_pca(z, d), z)
    n_kn = len(kn_idx)
    return CandidateSets(
        kn_idx, labels[kn_idx], z[:n_kn], im_idx, labels[im_idx], z[n_kn:], nk
    )


# -- k-means++ ------------------------------------------------------------


def _sq_dists(x, centroids):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centroids.T + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def seed_pp(x, k: int, rng: Rng) -> np.ndarray:
    """D^2 sampling."""
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(n))
        else:
            nxt = rng.choice(n, p=d2 / total)
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


def lloyd(x, centroids, max_iter: int = 100) -> Clustering:
    k = len(centroids)
    assign = None
    trace = []
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # re-seed from the point farthest from its own centroid
            far = np.argmax(((x - centroids[assign]) ** 2).sum(1))
            centroids[j] = x[far]
            assign[far] = j
    d2 = _sq_dists(x, centroids)
    assign = np.argmin(d2, axis=1)
    sse = float(((x - centroids[assign]) ** 2).sum())
    return Clustering(k, centroids, assign, sse, it, trace)


def kmeans_pp(x, k: int, rng: Rng, restarts: int = 8, max_iter: int = 100) -> Clustering:
    """Best of ``restarts`` Lloyd runs with k-means++ seeding (lowest SSE wins)."""
    x = as_matrix(x, "x")
    if not 1 <= k <= len(x):
        raise ContractError(f"k={k} must lie in [1, {len(x)}]")
    best = None
    for r in range(restarts):
        run = lloyd(x, seed_pp(x, k, rng.child("restart", r)), max_iter)
        if best is None or run.sse < best.sse:
            best = run
    return best


# -- clustering accuracy --------------------------------------------------


def cooccurrence(assignment, labels) -> np.ndarray:
    a = np.asarray(assignment, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    m = np.zeros((a.max() + 1, y.max() + 1), dtype=np.int64)
    np.add.at(m, (a, y), 1)
    return m


def ca_from_cooccurrence(m) -> float:
    """Best injective cluster-to-label matching, as a fraction of all counts."""
    m = np.asarray(m)
    total = m.sum()
    if total == 0:
        raise ContractError("clustering accuracy is undefined on an empty set")
    rows, cols = linear_sum_assignment(m, maximize=True)
    return float(m[rows, cols].sum() / total)


def clustering_accuracy(assignment, labels) -> float:
    if len(labels) == 0:
        raise ContractError("clustering accuracy is undefined on an empty set")
    return ca_from_cooccurrence(cooccurrence(assignment, labels))


# -- elbow ----------------------------------------------------------------


@dataclass
class Knee:
    k: int | None
    difference: np.ndarray
    threshold: float | None


def kneedle(ks, sse, sensitivity: float = 1.0) -> Knee:
    """Knee of a decreasing convex curve; ``k`` is None when no knee qualifies.

    Both axes are min-max normalised, the difference curve is
    ``(1 - y) - x`` and its maximum must be followed by a drop below
    ``max - sensitivity * mean(diff(x))``.
    """
    ks = np.asarray(ks, dtype=np.float64)
    sse = np.asarray(sse, dtype=np.float64)
    if len(ks) < 4 or len(ks) != len(sse):
        raise ContractError("need at least four (k, sse) points")
    if np.any(np.diff(ks) <= 0):
        raise ContractError("k values must be strictly increasing")
    x = (ks - ks[0]) / (ks[-1] - ks[0])
    span = sse.max() - sse.min()
    if span <= 0:
        return Knee(None, np.zeros_like(x), None)
    y = (sse - sse.min()) / span
    diff = (1.0 - y) - x
    i = int(np.argmax(diff))
    threshold = diff[i] - sensitivity * float(np.mean(np.diff(x)))
    if diff[i] <= 1e-12 or not np.any(diff[i + 1:] < threshold):
        return Knee(None, diff, threshold)
    return Knee(int(ks[i]), diff, threshold)


def elbow_k(sweep, sensitivity: float = 1.0) -> int | None:
    """Knee location from ``[(k, sse), ...]`` (extra tuple fields are ignored)."""
    ks = [row[0] for row in sweep]
    sse = [row[1] for row in sweep]
    return kneedle(ks, sse, sensitivity).k


TIE_BREAKS = ("elbow", "smallest")


def best_ca_k(sweep, near=None, tol: float = 1e-12) -> int:
    """Cluster count with the highest CA.

    Well separated known clusters often give CA = 1 for several counts; ties
    go to the count closest to ``near`` (then the smaller one), or simply to
    the smallest count when ``near`` is None.
    """
    cas = np.array([row[2] for row in sweep])
    tied = [row[0] for row, ca in zip(sweep, cas) if ca >= cas.max() - tol]
    if near is None:
        return tied[0]
    return min(tied, key=lambda k: (abs(k - near), k))


def estimate_k(
    cands: CandidateSets,
    k_max: int,
    rng: Rng,
    restarts: int = 8,
    max_iter: int = 100,
    sensitivity: float = 1.0,
    prior_k: int = 1,
    tie_break: str = "elbow",
) -> KEstimate:
    """Sweep total cluster counts ``num_known+1 .. num_known+k_max`` and pick k*."""
    if tie_break not in TIE_BREAKS:
        raise ContractError(f"tie_break must be one of {TIE_BREAKS}")
    nk = cands.num_known
    if len(cands.kn_index) == 0:
        raise ContractError("no confident known-class candidates")
    if len(cands.im_index) == 0:
        return KEstimate(prior_k + nk, prior_k + nk, prior_k + nk, prior_k, [], no_update=True)
    x = cands.features
    n_kn = len(cands.kn_index)
    sweep = []
    for total in range(nk + 1, nk + k_max + 1):
        if total > len(x):
            break
        cl = kmeans_pp(x, total, rng.child("sweep", total), restarts, max_iter)
        ca = clustering_accuracy(cl.assignment[:n_kn], cands.kn_labels)
        sweep.append((total, cl.sse, ca))

    k_elbow = elbow_k(sweep, sensitivity) if len(sweep) >= 4 else None
    k_ca = best_ca_k(sweep, k_elbow if tie_break == "elbow" else None)
    fallback = k_elbow is None
    if fallback:
        k_elbow = k_ca
    k_hat = half_up((k_ca + k_elbow) / 2)
    return KEstimate(k_ca, k_elbow, k_hat, max(1, k_hat - nk), sweep, elbow_fallback=fallback)


def assign_pseudo_classes(cands: CandidateSets, k_star: int, rng: Rng,
                          restarts: int = 8, max_iter: int = 100) -> DiscoveryResult:
    """Cluster the implicit candidates into ``k_star`` groups labelled ``num_known + i``."""
    if k_star < 1:
        raise ContractError("k_star must be >= 1")
    n_im = len(cands.im_index)
    if n_im == 0:
        raise EmptyUnknownError("no implicit-class candidates to cluster")
    clamped = k_star > n_im
    k = min(k_star, n_im)
    if k == 1:
        assign = np.zeros(n_im, dtype=np.int64)
    else:
        assign = kmeans_pp(cands.im_features, k, rng, restarts, max_iter).assignment
    labels = cands.num_known + assign
    groups = [cands.im_index[assign == i] for i in range(k)]
    return DiscoveryResult(k, groups, cands.im_index, labels, clamped)


def dump_sweep_csv(sweep) -> str:
    lines = ["k_total,sse,ca"]
    lines += [f"{k},{sse!r},{ca!r}" for k, sse, ca in sweep]
    return "\n".join(lines) + "\n"
