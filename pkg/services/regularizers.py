"""
Deformation regularizers: the canonical k-NN strain prior and its
variants, the half-cosine warmup, and jitter-weighted Gaussian dropout.

The strain prior samples a minibatch G of Gaussians and penalizes

    weight / (|G| k) * sum_{i in G} sum_{j in N_k(i)} q_ij

where q_ij compares the deformations of canonical neighbours:

    strain    ||u_i - u_j||^2 / (||x_i - x_j||^2 + eps)
    on_embed  ||h_i - h_j||^2 / (||x_i - x_j||^2 + eps)
    arap      ||R_i (x_j - x_i) - ((x_j + u_j) - (x_i + u_i))||^2 / (||x_i - x_j||^2 + eps)
    no_norm   ||u_i - u_j||^2

with R_i the unweighted Kabsch rotation of row i's canonical onto its
deformed neighbour offsets.

Canonical positions and neighbour distances are constants of the loss.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import structlog
from scipy.spatial import cKDTree

from core.errors import ContractError
from models.config import RegConfig, SmoothnessVariant

logger = structlog.get_logger(__name__)

COINCIDENT_FLOOR = 1e-8  # world units^2
MAX_DROP_PROBABILITY = 0.95


@dataclass
class NeighborGraph:
    """k nearest canonical neighbours per Gaussian, with squared distances."""

    indices: np.ndarray  # (K, k) int
    dist2: np.ndarray  # (K, k)
    k: int
    built_at: int = 0
    rebuild_interval: int = 500
    needs_rebuild: bool = False

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    def is_stale(self, iteration: int) -> bool:
        return self.needs_rebuild or iteration - self.built_at >= self.rebuild_interval

    def remap(self, source: np.ndarray, index_map: np.ndarray) -> "NeighborGraph":
        """
        Carry the graph across a densify/prune step without rebuilding.

        Args:
            source: For each row of the new cloud, the old row it came from
            index_map: Old index -> new index, -1 for removed Gaussians

        Rows of new Gaussians copy their parent's row; references to removed
        Gaussians fall back to the first surviving neighbour of the row.
        """
        count = source.shape[0]
        if self.k == 0:
            return NeighborGraph(
                indices=np.zeros((count, 0), dtype=np.int64),
                dist2=np.zeros((count, 0)),
                k=0,
                built_at=self.built_at,
                rebuild_interval=self.rebuild_interval,
                needs_rebuild=count > 1,
            )
        mapped = index_map[self.indices[source]]
        dist2 = self.dist2[source].copy()
        rows = np.arange(count)
        invalid = (mapped < 0) | (mapped == rows[:, None])
        valid_any = (~invalid).any(axis=1)
        first_valid = np.argmax(~invalid, axis=1)
        fallback = mapped[rows, first_valid]
        fallback_d2 = dist2[rows, first_valid]
        mapped = np.where(invalid, fallback[:, None], mapped)
        dist2 = np.where(invalid, fallback_d2[:, None], dist2)
        needs_rebuild = bool(not valid_any.all())
        if needs_rebuild:
            mapped = np.where(valid_any[:, None], mapped, (rows[:, None] + 1) % count)
        return NeighborGraph(
            indices=mapped.astype(np.int64),
            dist2=dist2,
            k=self.k,
            built_at=self.built_at,
            rebuild_interval=self.rebuild_interval,
            needs_rebuild=needs_rebuild or self.needs_rebuild,
        )


def build_neighbor_graph(
    positions: np.ndarray,
    k: int,
    iteration: int = 0,
    rebuild_interval: int = 500,
) -> NeighborGraph:
    """
    Exact k nearest neighbours in canonical space, ties broken by lower index.

    Shrinks k to K-1 (with a warning) when the cloud is too small.
    """
    positions = np.asarray(positions, dtype=np.float64)
    count = positions.shape[0]
    if k < 1:
        raise ContractError("k must be >= 1")
    if count <= k:
        logger.warning("graph.k_shrunk", requested_k=k, k=count - 1, count=count)
        k = count - 1
    if k == 0:
        return NeighborGraph(
            indices=np.zeros((count, 0), dtype=np.int64),
            dist2=np.zeros((count, 0)),
            k=0,
            built_at=iteration,
            rebuild_interval=rebuild_interval,
        )

    tree = cKDTree(positions)
    # one extra candidate so self (or a coincident twin) can be dropped
    dist, _ = tree.query(positions, k=k + 1)
    radius = np.asarray(dist).reshape(count, k + 1)[:, -1]
    # every point tied with the k-th neighbour is a candidate
    balls = tree.query_ball_point(positions, radius * (1.0 + 1e-9) + 1e-12)
    indices = np.empty((count, k), dtype=np.int64)
    for row, ball in enumerate(balls):
        candidates = np.array([j for j in ball if j != row], dtype=np.int64)
        offsets = positions[candidates] - positions[row]
        d2 = (offsets * offsets).sum(axis=1)
        indices[row] = candidates[np.lexsort((candidates, d2))[:k]]
    diff = positions[indices] - positions[:, None, :]
    dist2 = np.maximum((diff * diff).sum(axis=-1), COINCIDENT_FLOOR)
    return NeighborGraph(
        indices=indices.astype(np.int64),
        dist2=dist2,
        k=k,
        built_at=iteration,
        rebuild_interval=rebuild_interval,
    )


def warmup_weight(iteration: int, window: tuple[int, int], weight: float) -> float:
    """Half-cosine ramp from 0 at window start to ``weight`` at window end."""
    start, end = window
    if start >= end:
        raise ContractError("warmup window start must precede its end")
    if iteration <= start:
        return 0.0
    if iteration >= end:
        return float(weight)
    phase = (iteration - start) / (end - start)
    return float(weight * (1.0 - np.cos(np.pi * phase)) / 2.0)


def kabsch_rotation(
    canonical: np.ndarray,
    deformed: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, bool]:
    """
    Proper rotation R minimizing sum_j w_j ||R a_j - b_j||^2 (no centring).

    Returns:
        (R, degenerate): identity and True when the offsets carry no rotation
    """
    a = np.asarray(canonical, dtype=np.float64)
    b = np.asarray(deformed, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] < 1:
        raise ContractError("kabsch needs matching (n, D) offset arrays with n >= 1")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[None, :]
    rotations, degenerate = batch_kabsch(a[None], b[None], w)
    if degenerate[0]:
        logger.debug("kabsch.degenerate", pairs=a.shape[0])
    return rotations[0], bool(degenerate[0])


def batch_kabsch(
    a: np.ndarray,
    b: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``kabsch_rotation`` over (G, k, D) offset sets."""
    groups, _, dim = a.shape
    w = np.ones(a.shape[:2]) if weights is None else weights
    if dim == 1:
        return np.ones((groups, 1, 1)), np.ones(groups, dtype=bool)
    if dim == 2:
        cross = (w * (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0])).sum(axis=1)
        dot = (w * (a * b).sum(axis=-1)).sum(axis=1)
        degenerate = (cross == 0.0) & (dot == 0.0)
        theta = np.where(degenerate, 0.0, np.arctan2(cross, dot))
        c, s = np.cos(theta), np.sin(theta)
        rotations = np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)
        return rotations, degenerate

    # H = sum_j w_j a_j b_j^T; R = V diag(1, .., d) U^T
    cov = np.einsum("gk,gki,gkj->gij", w, a, b)
    degenerate = ~np.any(cov != 0.0, axis=(1, 2))
    u, _, vt = np.linalg.svd(cov)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0.0, 1.0, d)
    fix = np.tile(np.eye(dim), (groups, 1, 1))
    fix[:, -1, -1] = d
    rotations = v @ fix @ ut
    rotations[degenerate] = np.eye(dim)
    return rotations, degenerate


_QUARTER_TURN = np.array([[0.0, -1.0], [1.0, 0.0]])


def _skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrices [w]_x of a (G, 3) batch."""
    zero = np.zeros(w.shape[0])
    return np.stack(
        [
            np.stack([zero, -w[:, 2], w[:, 1]], axis=-1),
            np.stack([w[:, 2], zero, -w[:, 0]], axis=-1),
            np.stack([-w[:, 1], w[:, 0], zero], axis=-1),
        ],
        axis=-2,
    )


def _kabsch_backward(
    a: np.ndarray,
    b: np.ndarray,
    rotations: np.ndarray,
    degenerate: np.ndarray,
    grad_rotation: np.ndarray,
) -> np.ndarray:
    """
    Gradient w.r.t. the deformed offsets ``b`` of a loss that depends on
    the unweighted Kabsch rotations through ``grad_rotation`` = dL/dR.

    In 2D R is the rotation by theta = atan2(sum a x b, sum a . b). In 3D R
    is the orthogonal polar factor of H^T with H = sum a b^T; writing
    H^T = R P, a perturbation dR = R [w]_x solves
    (tr(P) I - P) w = axial(R^T dH^T - dH R). Degenerate sets get no
    rotation gradient.
    """
    dim = a.shape[-1]
    if dim == 1:
        return np.zeros_like(b)
    if dim == 2:
        cross = (a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]).sum(axis=1)
        dot = (a * b).sum(axis=(1, 2))
        norm2 = np.where(degenerate, 1.0, cross * cross + dot * dot)
        # dR/dtheta = R J
        grad_theta = np.einsum("gij,gij->g", grad_rotation, rotations @ _QUARTER_TURN)
        grad_theta = np.where(degenerate, 0.0, grad_theta)
        perp = a @ _QUARTER_TURN.T
        d_theta = (dot[:, None, None] * perp - cross[:, None, None] * a) / norm2[:, None, None]
        return grad_theta[:, None, None] * d_theta

    cov = np.einsum("gki,gkj->gij", a, b)
    r_t = np.swapaxes(rotations, 1, 2)
    polar = r_t @ np.swapaxes(cov, 1, 2)
    polar = 0.5 * (polar + np.swapaxes(polar, 1, 2))
    system = np.trace(polar, axis1=1, axis2=2)[:, None, None] * np.eye(3) - polar
    rel = r_t @ grad_rotation
    axial = np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0], rel[:, 1, 0] - rel[:, 0, 1]], axis=-1)
    y = np.einsum("gij,gj->gi", np.linalg.pinv(system, rcond=1e-10, hermitian=True), axial)
    y[degenerate] = 0.0
    # dL/dH^T = R [y]_x
    return np.einsum("gij,gkj->gki", rotations @ _skew(y), a)


@dataclass
class SmoothnessResult:
    loss: float
    grad_u: Optional[np.ndarray]
    grad_h: Optional[np.ndarray]


def _pairwise(values: np.ndarray, sample: np.ndarray, nbrs: np.ndarray) -> np.ndarray:
    return values[sample][:, None, :] - values[nbrs]


def smoothness_loss(
    variant: SmoothnessVariant | str,
    positions: np.ndarray,
    u: np.ndarray,
    h: Optional[np.ndarray],
    graph: NeighborGraph,
    sample: np.ndarray,
    weight: float,
    eps: float = 1e-8,
) -> SmoothnessResult:
    """
    Sampled neighbour smoothness loss and its gradients w.r.t. u and h.

    Args:
        variant: strain, on_embed, arap, no_norm or off
        positions: Canonical positions (K, D), constants of the loss
        u: Displacements (K, D)
        h: Embeddings (K, E); required by on_embed
        graph: Canonical neighbour graph
        sample: Indices of the sampled Gaussians
        weight: Effective weight (after warmup)
        eps: Denominator regularizer
    """
    variant = SmoothnessVariant(variant)
    if variant == SmoothnessVariant.OFF:
        return SmoothnessResult(0.0, None, None)

    sample = np.asarray(sample, dtype=np.int64)
    count = u.shape[0]
    if sample.size and (sample.min() < 0 or sample.max() >= count):
        raise ContractError("sample indices out of range")
    grad_u = np.zeros_like(u)
    grad_h = None if h is None else np.zeros_like(h)
    if sample.size == 0 or graph.k == 0:
        return SmoothnessResult(0.0, grad_u, grad_h)

    nbrs = graph.indices[sample]
    denom = np.ones_like(graph.dist2[sample]) if variant == SmoothnessVariant.NO_NORM else graph.dist2[sample] + eps
    scale = weight / (sample.size * graph.k)

    if variant == SmoothnessVariant.ON_EMBED:
        if h is None:
            raise ContractError("on_embed needs the field embedding h")
        residual = _pairwise(h, sample, nbrs)
        target = grad_h
    elif variant == SmoothnessVariant.ARAP:
        canonical = positions[nbrs] - positions[sample][:, None, :]
        deformed = canonical - _pairwise(u, sample, nbrs)
        # R_i fits the unweighted neighbourhood; 1/denom weights only the residuals
        rotations, degenerate = batch_kabsch(canonical, deformed)
        residual = np.einsum("gij,gkj->gki", rotations, canonical) - deformed
        loss = scale * float(((residual**2).sum(axis=-1) / denom).sum())
        coef = 2.0 * scale * residual / denom[..., None]
        grad_rotation = np.einsum("gki,gkj->gij", coef, canonical)
        grad_b = _kabsch_backward(canonical, deformed, rotations, degenerate, grad_rotation) - coef
        # b = a + u_j - u_i
        np.add.at(grad_u, sample, -grad_b.sum(axis=1))
        np.add.at(grad_u, nbrs.reshape(-1), grad_b.reshape(-1, grad_b.shape[-1]))
        return SmoothnessResult(loss, grad_u, grad_h)
    else:
        residual = _pairwise(u, sample, nbrs)
        target = grad_u

    loss = scale * float(((residual**2).sum(axis=-1) / denom).sum())
    coef = 2.0 * scale * residual / denom[..., None]
    np.add.at(target, sample, coef.sum(axis=1))
    np.add.at(target, nbrs.reshape(-1), -coef.reshape(-1, coef.shape[-1]))
    return SmoothnessResult(loss, grad_u, grad_h)


@dataclass
class JitterEstimate:
    """Streaming mean/variance of each Gaussian's displacement over timesteps."""

    mean: np.ndarray  # (K, D)
    m2: np.ndarray  # (K, D)
    counts: np.ndarray  # (K,)

    @classmethod
    def empty(cls, count: int, dim: int) -> "JitterEstimate":
        return cls(np.zeros((count, dim)), np.zeros((count, dim)), np.zeros(count, dtype=np.int64))

    @property
    def variance(self) -> np.ndarray:
        """Total (trace) population variance; 0 for fewer than two samples."""
        return self.m2.sum(axis=1) / np.maximum(self.counts, 1)

    def take(self, source: np.ndarray) -> "JitterEstimate":
        return JitterEstimate(self.mean[source].copy(), self.m2[source].copy(), self.counts[source].copy())


def update_jitter(est: JitterEstimate, u: np.ndarray) -> JitterEstimate:
    """Welford update with one displacement sample per Gaussian."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != est.mean.shape:
        raise ContractError(f"displacement sample has shape {u.shape}, expected {est.mean.shape}")
    counts = est.counts + 1
    delta = u - est.mean
    mean = est.mean + delta / counts[:, None]
    m2 = est.m2 + delta * (u - mean)
    return JitterEstimate(mean, m2, counts)


@dataclass
class DropSample:
    keep: np.ndarray  # bool (K,)
    probability: np.ndarray  # (K,)
    opacity_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.opacity_scale is None:
            self.opacity_scale = 1.0 / (1.0 - self.probability)


def ptdrop_rate(iteration: int, window: tuple[int, int], p_max: float) -> float:
    return warmup_weight(iteration, window, p_max)


def ptdrop_mask(
    iteration: int,
    count: int,
    jitter: JitterEstimate,
    config: RegConfig,
    rng: np.random.Generator,
    window: Optional[tuple[int, int]] = None,
) -> DropSample:
    """
    Jitter-weighted dropout mask for one forward pass.

    The base rate follows a cosine ramp 0 -> p_max over the window; each
    Gaussian's rate is scaled by its trajectory variance relative to the
    mean (uniform when weighting is off or all variances are zero), then
    clamped to [0, 0.95]. Kept Gaussians get an opacity rescale 1/(1-p).
    """
    if jitter.counts.shape != (count,):
        raise ContractError("jitter estimate does not match the cloud size")
    window = window or (config.ptdrop_start, config.ptdrop_end)
    base = ptdrop_rate(iteration, window, config.ptdrop_max)
    if base == 0.0:
        return DropSample(keep=np.ones(count, dtype=bool), probability=np.zeros(count))

    weights = np.ones(count)
    if config.jitter_weighting:
        variance = jitter.variance
        mean_variance = float(variance.mean())
        if mean_variance > 0.0:
            weights = variance / mean_variance
    probability = np.clip(base * weights, 0.0, MAX_DROP_PROBABILITY)
    keep = rng.random(count) >= probability
    return DropSample(keep=keep, probability=probability)
