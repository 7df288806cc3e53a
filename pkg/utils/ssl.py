"""
Self-supervised pre-training pipeline
Sequence masking of slice chains, the k-means clusterer ensemble that
produces pseudo-labels from unmasked slices, the temperature softmax and the
multi-clusterer negative log-likelihood, and one masked pre-training step
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import MiniBatchKMeans, kmeans_plusplus

from utils import ops
from utils.errors import ArgumentError, NonFiniteError, ShapeError
from utils.tensor import Tensor, split_rng, tensor

logger = logging.getLogger(__name__)

# Published pre-training constants
PHI1 = 0.1
PHI2 = 0.7
MASK_LENGTH = 5
PATCH_SIZES = (1, 2, 4, 8, 16, 32, 96)
TAU = 0.1
KMEANS_ITERATIONS = 350
KMEANS_SUBSET = 0.1

# Rows x centroids x features handled per distance chunk
_DISTANCE_CHUNK = 1 << 22


@dataclass
class SliceMask:
    """One patch-mask draw on one slice"""
    slice_index: int
    patch_size: int
    bitmap: np.ndarray

    @property
    def masked_patches(self):
        return int(self.bitmap.sum())

    def voxels(self, height, width):
        """Expand the patch bitmap to an (H, W) boolean mask"""
        p = self.patch_size
        full = np.repeat(np.repeat(self.bitmap, p, axis=0), p, axis=1)
        return full[:height, :width]


@dataclass
class MaskPlan:
    """Masking decisions for one volume of shape (S, H, W)"""
    shape: tuple
    anchors: list
    sequence_length: int
    draws: dict = field(default_factory=dict)

    @property
    def is_empty(self):
        return not self.draws

    @property
    def masked_slices(self):
        """Every slice covered by at least one chain, ascending"""
        return sorted(self.draws)

    def voxel_mask(self):
        """Union of all draws as a boolean (S, H, W) array"""
        s, h, w = self.shape
        mask = np.zeros((s, h, w), dtype=bool)
        for index, draws in self.draws.items():
            for draw in draws:
                mask[index] |= draw.voxels(h, w)
        return mask


def build_mask_plan(volume_shape, phi1=PHI1, phi2=PHI2, sequence_length=MASK_LENGTH,
                    patch_sizes=PATCH_SIZES, rng=None):
    """
    Draw mask chains over the slices of one volume

    Each slice is an anchor with probability phi1. An anchor masks itself and
    its sequence_length - 1 predecessors (truncated at the first slice); every
    slice of a chain draws its own patch size and a patch bitmap with each
    patch masked with probability phi2. Overlapping chains add draws, so the
    final mask is their union.

    Args:
        volume_shape: (S, H, W), or any shape ending in those three extents
        rng: numpy Generator

    Returns:
        MaskPlan

    Raises:
        ArgumentError: probabilities outside [0, 1], sequence_length < 1 or no patch sizes
    """
    if not 0.0 <= phi1 <= 1.0 or not 0.0 <= phi2 <= 1.0:
        raise ArgumentError(f"mask probabilities must lie in [0, 1], got phi1={phi1}, phi2={phi2}")
    if sequence_length < 1:
        raise ArgumentError(f"sequence length must be >= 1, got {sequence_length}")
    patch_sizes = tuple(int(p) for p in patch_sizes)
    if not patch_sizes or min(patch_sizes) < 1:
        raise ArgumentError("at least one positive patch size is required")
    if rng is None:
        raise ArgumentError("build_mask_plan needs an explicit rng")
    s, h, w = (int(n) for n in volume_shape[-3:])

    anchors = [int(a) for a in np.flatnonzero(rng.random(s) < phi1)]
    plan = MaskPlan((s, h, w), anchors, sequence_length)
    for anchor in anchors:
        for index in range(max(0, anchor - sequence_length + 1), anchor + 1):
            p = int(patch_sizes[rng.integers(len(patch_sizes))])
            grid = (math.ceil(h / p), math.ceil(w / p))
            bitmap = rng.random(grid) < phi2
            plan.draws.setdefault(index, []).append(SliceMask(index, p, bitmap))
    return plan


def apply_mask(volume, plan, fill=0.0):
    """
    Set masked voxels to the fill value

    Args:
        volume: array or Tensor (..., S, H, W); leading axes share the plan
        plan: MaskPlan for the trailing (S, H, W)

    Returns:
        Same kind as the input; unmasked voxels are bit-identical
    """
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if tuple(data.shape[-3:]) != tuple(plan.shape):
        raise ShapeError(f"mask plan for {plan.shape} does not match volume {data.shape}")
    if plan.is_empty:
        out = data.copy()
    else:
        out = np.where(plan.voxel_mask(), data.dtype.type(fill), data)
    return Tensor(out) if isinstance(volume, Tensor) else out


def slice_features(volume):
    """
    One row-major vector per slice

    Args:
        volume: (S, H, W), (C, S, H, W) or (b, C, S, H, W) array or Tensor

    Returns:
        float64 array (b*S, C*H*W)
    """
    data = volume.data if isinstance(volume, Tensor) else np.asarray(volume)
    if data.ndim == 3:
        data = data[None, None]
    elif data.ndim == 4:
        data = data[None]
    elif data.ndim != 5:
        raise ShapeError(f"slice_features expects a 3-, 4- or 5-axis volume, got {data.shape}")
    b, c, s, h, w = data.shape
    return np.ascontiguousarray(data.transpose(0, 2, 1, 3, 4).reshape(b * s, c * h * w), dtype=np.float64)


def nearest_centroid(vectors, centroids):
    """
    Index of the closest centroid by squared Euclidean distance

    Distances are computed from explicit differences in chunks; np.argmin
    returns the first minimum, so ties go to the smallest index.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    k, t = centroids.shape
    rows = max(1, _DISTANCE_CHUNK // max(1, k * t))
    labels = np.empty(len(vectors), dtype=np.int64)
    for start in range(0, len(vectors), rows):
        chunk = vectors[start:start + rows]
        diff = chunk[:, None, :] - centroids[None, :, :]
        labels[start:start + rows] = np.argmin(np.einsum("nkt,nkt->nk", diff, diff), axis=1)
    return labels


@dataclass
class KMeansClusterer:
    """Trained centroids of one clusterer"""
    centroids: np.ndarray
    iterations: int = 0
    batch_size: int = 0
    objective_history: list = field(default_factory=list)

    @property
    def k(self):
        return int(self.centroids.shape[0])

    def assign(self, vectors):
        return nearest_centroid(vectors, self.centroids)

    def objective(self, vectors):
        """Sum of squared distances to the assigned centroid"""
        vectors = np.asarray(vectors, dtype=np.float64)
        diff = vectors - self.centroids[self.assign(vectors)]
        return float(np.einsum("nt,nt->", diff, diff))

    def refine(self, vectors, epochs=1):
        """
        Full-batch Lloyd epochs; empty clusters keep their centroid

        Returns:
            Objective after each epoch (non-increasing)
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        for _ in range(epochs):
            labels = self.assign(vectors)
            for j in range(self.k):
                members = vectors[labels == j]
                if len(members):
                    self.centroids[j] = members.mean(axis=0)
            self.objective_history.append(self.objective(vectors))
        return list(self.objective_history[-epochs:])


def train_clusterer(vectors, k, iterations=KMEANS_ITERATIONS, subset_fraction=KMEANS_SUBSET, rng=None):
    """
    k-means++ initialization followed by mini-batch updates on random subsets

    Args:
        vectors: (n, T) slice features
        k: Number of centroids
        iterations: Mini-batch updates
        subset_fraction: Share of the vectors drawn per update
        rng: numpy Generator; fixes both the initialization and the subsets

    Returns:
        KMeansClusterer

    Raises:
        ArgumentError: empty dataset or k outside [1, n]
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = len(vectors)
    if n == 0:
        raise ArgumentError("cannot train a clusterer on an empty dataset")
    if not 1 <= k <= n:
        raise ArgumentError(f"K={k} must lie in [1, {n}] (number of vectors)")
    if not 0.0 < subset_fraction <= 1.0:
        raise ArgumentError(f"subset fraction must lie in (0, 1], got {subset_fraction}")
    if rng is None:
        raise ArgumentError("train_clusterer needs an explicit rng")

    batch = min(n, math.ceil(subset_fraction * n))
    if batch < k:
        logger.warning("mini-batch of %d vectors raised to K=%d", batch, k)
        batch = k
    seed = int(rng.integers(2 ** 31 - 1))
    centers, _ = kmeans_plusplus(vectors, n_clusters=k, random_state=seed)
    model = MiniBatchKMeans(n_clusters=k, init=centers, n_init=1, batch_size=batch, random_state=seed)
    for _ in range(iterations):
        subset = np.sort(rng.choice(n, size=batch, replace=False))
        model.partial_fit(vectors[subset])
    centroids = np.array(model.cluster_centers_ if iterations else centers, dtype=np.float64)
    logger.info("trained clusterer K=%d on %d vectors (%d iterations, batch %d)", k, n, iterations, batch)
    return KMeansClusterer(centroids, iterations, batch)


@dataclass
class ClustererEnsemble:
    """Independently seeded clusterers with their own K"""
    clusterers: list

    @property
    def sizes(self):
        return tuple(c.k for c in self.clusterers)

    def __len__(self):
        return len(self.clusterers)

    def assign(self, vectors):
        """(n, T) -> (n, clusterers) labels"""
        return np.stack([c.assign(vectors) for c in self.clusterers], axis=1)


def train_ensemble(vectors, clusterers_n, k_min, k_max, iterations=KMEANS_ITERATIONS,
                   subset_fraction=KMEANS_SUBSET, rng=None):
    """
    Train clusterers_n clusterers, each with K drawn uniformly from [k_min, k_max]

    K is capped at the number of vectors (with a warning).
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if clusterers_n < 1:
        raise ArgumentError("need at least one clusterer")
    if not 1 <= k_min <= k_max:
        raise ArgumentError(f"need 1 <= k_min <= k_max, got {k_min}, {k_max}")
    clusterers = []
    for i, stream in enumerate(split_rng(rng, clusterers_n)):
        k = int(stream.integers(k_min, k_max + 1))
        if k > len(vectors):
            logger.warning("clusterer %d: K=%d capped at %d vectors", i, k, len(vectors))
            k = len(vectors)
        clusterers.append(train_clusterer(vectors, k, iterations, subset_fraction, stream))
    return ClustererEnsemble(clusterers)


@dataclass
class PseudoLabelSet:
    """Per volume an array (slices, clusterers) of cluster indices"""
    cluster_sizes: tuple
    labels: list

    @property
    def num_volumes(self):
        return len(self.labels)

    @property
    def num_clusterers(self):
        return len(self.cluster_sizes)

    def for_volume(self, index):
        return self.labels[index]


def assign_pseudo_labels(ensemble, volumes):
    """
    Label every slice of every (unmasked) volume with every clusterer

    Args:
        ensemble: ClustererEnsemble
        volumes: Iterable of (C, S, H, W) arrays

    Returns:
        PseudoLabelSet
    """
    labels = [ensemble.assign(slice_features(v)).astype(np.uint32) for v in volumes]
    return PseudoLabelSet(ensemble.sizes, labels)


def temperature_softmax(logits, tau=TAU):
    """
    softmax(logits / tau) over the last axis

    Raises:
        ArgumentError: if tau <= 0
    """
    if not isinstance(logits, Tensor):
        logits = tensor(logits)
    return ops.softmax(logits, axis=-1, temperature=tau)


def pretrain_loss(probs, labels):
    """
    Summed negative log-likelihood of the pseudo-labels over clusterers and slices

    Args:
        probs: Tensor (slices, clusterers, K) or a list with one Tensor (slices, K_i) per clusterer
        labels: Integer array (slices, clusterers)

    Returns:
        Scalar Tensor

    Raises:
        ArgumentError: if a label is outside [0, K_i)
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    if isinstance(probs, Tensor):
        if probs.ndim != 3:
            raise ShapeError(f"expected probabilities (slices, clusterers, K), got {probs.shape}")
        probs = [probs[:, i, :] for i in range(probs.shape[1])]
    if len(probs) != labels.shape[1]:
        raise ShapeError(f"{len(probs)} clusterers of probabilities but labels {labels.shape}")
    rows = np.arange(labels.shape[0])
    total = None
    for i, p in enumerate(probs):
        if p.shape[0] != labels.shape[0]:
            raise ShapeError(f"clusterer {i}: {p.shape[0]} slices of probabilities, {labels.shape[0]} labels")
        column = labels[:, i].astype(np.int64)
        if column.size and (column.min() < 0 or column.max() >= p.shape[1]):
            raise ArgumentError(f"clusterer {i}: labels must lie in [0, {p.shape[1]})")
        term = -(p[rows, column].log().sum())
        total = term if total is None else total + term
    return total


def head_probabilities(logits, cluster_sizes, tau=TAU):
    """
    Split per-slice head logits into per-clusterer distributions

    Args:
        logits: Tensor (slices, clusterers, max K)
        cluster_sizes: K_i per clusterer; clusterer i uses its first K_i logits

    Returns:
        List of Tensors (slices, K_i)
    """
    if logits.ndim != 3 or logits.shape[1] != len(cluster_sizes) or logits.shape[2] < max(cluster_sizes):
        raise ShapeError(f"logits {logits.shape} do not cover cluster sizes {tuple(cluster_sizes)}")
    return [temperature_softmax(logits[:, i, :k], tau) for i, k in enumerate(cluster_sizes)]


@dataclass
class PretrainStepResult:
    """Loss of one masked pre-training step"""
    loss: float
    masked_slices: int
    updated: bool
    lr: float = 0.0


def pretrain_step(model, head, batch, plans, labels, optimizer, cluster_sizes, tau=TAU, fill=0.0, step=None):
    """
    One masked pre-training update

    The volumes are masked by their plans, passed through the backbone's
    fused features and the pre-training head; the loss covers only the slices
    of each volume that belong to a mask chain.

    Args:
        model: Backbone exposing features(x)
        head: PretrainHead
        batch: Unmasked volumes, array (b, C, S, H, W)
        plans: One MaskPlan per volume
        labels: One (S, clusterers) label array per volume
        optimizer: AdamW over backbone and head parameters
        cluster_sizes: K_i per clusterer
        step: Loop step used for the learning-rate schedule, so skipped steps
            still move along it (None: the optimizer's update count)

    Returns:
        PretrainStepResult; no update happens when no slice is masked
    """
    batch = np.asarray(batch)
    if len(plans) != batch.shape[0] or len(labels) != batch.shape[0]:
        raise ShapeError(f"{batch.shape[0]} volumes but {len(plans)} plans and {len(labels)} label sets")
    if sum(len(p.masked_slices) for p in plans) == 0:
        logger.debug("no masked slices in this batch; skipping update")
        return PretrainStepResult(0.0, 0, False)

    masked = np.stack([apply_mask(volume, plan, fill) for volume, plan in zip(batch, plans)])
    model.train()
    head.train()
    logits = head(model.features(Tensor(masked)))
    total = None
    count = 0
    for v, plan in enumerate(plans):
        slices = np.asarray(plan.masked_slices, dtype=np.int64)
        if not len(slices):
            continue
        probs = head_probabilities(logits[v][slices], cluster_sizes, tau)
        term = pretrain_loss(probs, np.asarray(labels[v])[slices])
        total = term if total is None else total + term
        count += len(slices)
    if not np.isfinite(total.item()):
        raise NonFiniteError(f"pre-training loss is {total.item()}")
    optimizer.zero_grad()
    total.backward()
    lr = optimizer.step(step)
    return PretrainStepResult(total.item(), count, True, lr)
