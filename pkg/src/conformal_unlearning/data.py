"""Synthetic data and the forget/retain split protocol.

All randomness flows from explicit integer seeds through
``numpy.random.default_rng`` so every split is reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

SCENARIOS = ("class_wise", "group_wise", "instance_wise")

# pool name -> fraction of the data; whatever is left over goes to training
DEFAULT_FRACTIONS = {
    "test_calib": 0.15,
    "test": 0.10,
    "unlearn_calib": 0.15,
    "unlearn": 0.15,
}
POOL_ORDER = ("test_calib", "test", "unlearn_calib", "unlearn")


class SplitError(ValueError):
    """A split would leave a required subset empty."""

    def __init__(self, subset: str, msg: str = ""):
        self.subset = subset
        super().__init__(msg or f"subset {subset!r} would be empty")


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            features = features.reshape(len(self.labels), -1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if not (features.shape[0] == labels.shape[0] == ids.shape[0]):
            raise ValueError("features, labels and ids must have the same length")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")
        if np.unique(ids).size != ids.size:
            raise ValueError("ids must be unique")
        if ids.size and ids.min() < 0:
            raise ValueError("ids must be non-negative")
        for arr in (features, labels, ids):
            arr.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_dims(self) -> int:
        return int(self.features.shape[1])

    def take(self, index) -> "Dataset":
        """Subset by integer index array or boolean mask."""
        index = np.asarray(index)
        return Dataset(self.features[index], self.labels[index], self.ids[index], self.n_classes)

    def select_ids(self, ids) -> "Dataset":
        mask = np.isin(self.ids, np.asarray(list(ids), dtype=np.int64))
        return self.take(mask)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.ids, other.ids]),
            self.n_classes,
        )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    forget_values: frozenset
    fractions: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        object.__setattr__(self, "forget_values", frozenset(int(v) for v in self.forget_values))


@dataclass(frozen=True)
class SplitBundle:
    """The named subsets of the forgetting protocol.

    ``calib_forget`` is the part of ``unlearn_calib`` sharing the forget
    attribute; baselines that need a forget-like validation set use it.
    """

    train: Dataset
    train_forget: Dataset
    train_retain: Dataset
    unlearn_forget: Dataset
    unlearn_retain: Dataset
    unlearn_calib: Dataset
    test_calib: Dataset
    test_forget: Dataset
    test_retain: Dataset
    scenario: ScenarioSpec
    calib_forget: Dataset | None = None

    SUBSETS = (
        "train", "train_forget", "train_retain", "unlearn_forget", "unlearn_retain",
        "unlearn_calib", "test_calib", "test_forget", "test_retain",
    )


# ---------------------------------------------------------------------------
# generation


def _class_means(n_classes: int, n_dims: int, separation: float, rng) -> np.ndarray:
    if n_classes == 1:
        return np.zeros((1, n_dims))
    if n_classes <= n_dims + 1:
        # regular simplex: centred standard basis in R^k, rotated into n_dims
        simplex = np.eye(n_classes) - 1.0 / n_classes
        u, s, _ = np.linalg.svd(simplex, full_matrices=False)
        coords = (u * s)[:, : n_classes - 1]
        basis, _ = np.linalg.qr(rng.standard_normal((n_dims, n_dims)))
        means = coords @ basis[:, : n_classes - 1].T
    else:
        means = rng.standard_normal((n_classes, n_dims))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    dist[np.diag_indices(n_classes)] = np.inf
    return means * (separation / dist.min())


def generate_mixture(
    n_classes: int, n_dims: int, n_per_class: int, separation: float, seed: int
) -> Dataset:
    """Isotropic unit-variance Gaussian classes.

    The class means are a regular simplex when it fits in ``n_dims``,
    otherwise random directions; either way they are scaled so that the
    closest pair of means is exactly ``separation`` apart.
    """
    for name, v in (("n_classes", n_classes), ("n_dims", n_dims), ("n_per_class", n_per_class)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = _class_means(n_classes, n_dims, float(separation), rng)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = means[labels] + rng.standard_normal((labels.size, n_dims))
    return Dataset(features, labels, np.arange(labels.size), n_classes)


# ---------------------------------------------------------------------------
# pools


def pool_sizes(n: int, fractions: Mapping[str, float]) -> dict[str, int]:
    """Floor each requested pool; the remainder goes to ``train``."""
    unknown = set(fractions) - set(POOL_ORDER)
    if unknown:
        raise ValueError(f"unknown pool names in fractions: {sorted(unknown)}")
    if any(f < 0 for f in fractions.values()):
        raise ValueError("fractions must be non-negative")
    if sum(fractions.values()) > 1 + 1e-12:
        raise ValueError("fractions sum to more than 1")
    sizes = {name: int(math.floor(fractions.get(name, 0.0) * n)) for name in POOL_ORDER}
    sizes["train"] = n - sum(sizes.values())
    return sizes


def cut_pools(n: int, fractions: Mapping[str, float], seed: int) -> dict[str, np.ndarray]:
    """One uniform shuffle of ``range(n)`` cut into contiguous pools.

    Calibration and unlearning pools come out of the same permutation,
    which is what makes them exchangeable.
    """
    sizes = pool_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    out, start = {}, 0
    for name in POOL_ORDER + ("train",):
        out[name] = np.sort(perm[start : start + sizes[name]])
        start += sizes[name]
    return out


def _require(name: str, ds: Dataset):
    if len(ds) == 0:
        raise SplitError(name)


def _split_by_mask(data: Dataset, pools, forget_mask: np.ndarray, spec: ScenarioSpec) -> SplitBundle:
    def part(name, forget):
        idx = pools[name]
        keep = forget_mask[idx] if forget else ~forget_mask[idx]
        return data.take(idx[keep])

    bundle = SplitBundle(
        train=data.take(pools["train"]),
        train_forget=part("train", True),
        train_retain=part("train", False),
        unlearn_forget=part("unlearn", True),
        unlearn_retain=part("unlearn", False),
        unlearn_calib=data.take(pools["unlearn_calib"]),
        test_calib=data.take(pools["test_calib"]),
        test_forget=part("test", True),
        test_retain=part("test", False),
        scenario=spec,
        calib_forget=part("unlearn_calib", True),
    )
    for name in ("unlearn_forget", "unlearn_retain", "unlearn_calib", "test_calib", "train"):
        _require(name, getattr(bundle, name))
    return bundle


def split_class_wise(
    data: Dataset, forget_labels, fractions: Mapping[str, float] | None = None, seed: int = 0
) -> SplitBundle:
    fractions = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    forget_labels = frozenset(int(v) for v in forget_labels)
    if not forget_labels:
        raise ValueError("forget_labels must be non-empty")
    present = set(np.unique(data.labels).tolist())
    missing = forget_labels - present
    if missing:
        raise ValueError(f"forget labels {sorted(missing)} do not occur in the data")
    spec = ScenarioSpec("class_wise", forget_labels, fractions, seed)
    pools = cut_pools(len(data), fractions, seed)
    mask = np.isin(data.labels, sorted(forget_labels))
    return _split_by_mask(data, pools, mask, spec)


def split_group_wise(
    data: Dataset,
    embeddings: np.ndarray,
    n_clusters: int,
    forget_clusters,
    fractions: Mapping[str, float] | None = None,
    seed: int = 0,
    max_iters: int = 100,
) -> SplitBundle:
    fractions = dict(DEFAULT_FRACTIONS if fractions is None else fractions)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(data):
        raise ValueError("embeddings must have one row per data point")
    forget_clusters = frozenset(int(v) for v in forget_clusters)
    if not forget_clusters:
        raise ValueError("forget_clusters must be non-empty")
    if min(forget_clusters) < 0 or max(forget_clusters) >= n_clusters:
        raise ValueError("forget_clusters must lie in [0, n_clusters)")
    assign, _ = kmeans(embeddings, n_clusters, max_iters, seed)
    mask = np.isin(assign, sorted(forget_clusters))
    if not mask.any():
        raise SplitError("unlearn_forget", "forget clusters contain no points")
    spec = ScenarioSpec("group_wise", forget_clusters, fractions, seed)
    pools = cut_pools(len(data), fractions, seed)
    return _split_by_mask(data, pools, mask, spec)


def split_instance_wise(
    data: Dataset, forget_ids, fractions: Mapping[str, float] | None = None, seed: int = 0
) -> SplitBundle:
    """Forget points are pinned to the training pool.

    Held-out pools are cut from the remaining points.  The unlearning
    retain set is an equal-size sample of trained retain points, and the
    unlearning calibration set is a 50/50 mixture of trained points and
    the unseen ``unlearn_calib`` pool.
    """
    fractions = dict({} if fractions is None else fractions)
    forget_ids = frozenset(int(v) for v in forget_ids)
    unknown = forget_ids - set(data.ids.tolist())
    if unknown:
        raise ValueError(f"unknown ids: {sorted(unknown)[:10]}")
    spec = ScenarioSpec("instance_wise", forget_ids, fractions, seed)
    rng = np.random.default_rng(seed)

    forget_mask = np.isin(data.ids, sorted(forget_ids))
    others = np.flatnonzero(~forget_mask)
    sub = cut_pools(others.size, fractions, seed)
    pools = {name: others[idx] for name, idx in sub.items()}
    train_idx = np.sort(np.concatenate([pools["train"], np.flatnonzero(forget_mask)]))
    train = data.take(train_idx)
    train_forget = data.take(np.flatnonzero(forget_mask))
    retain_idx = pools["train"]
    train_retain = data.take(retain_idx)

    shuffled = rng.permutation(retain_idx)
    k = min(len(train_forget), shuffled.size)
    unlearn_retain_idx = np.sort(shuffled[:k])
    unseen_calib = pools["unlearn_calib"]
    m = min(unseen_calib.size, shuffled.size - k)
    trained_calib_idx = shuffled[k : k + m]
    calib_idx = np.sort(np.concatenate([unseen_calib, trained_calib_idx]))

    forget_label_set = np.unique(train_forget.labels)
    calib_forget = data.take(unseen_calib[np.isin(data.labels[unseen_calib], forget_label_set)])
    return SplitBundle(
        train=train,
        train_forget=train_forget,
        train_retain=train_retain,
        unlearn_forget=train_forget,
        unlearn_retain=data.take(unlearn_retain_idx),
        unlearn_calib=data.take(calib_idx),
        test_calib=data.take(pools["test_calib"]),
        # no unseen population shares an individual point's identity
        test_forget=data.take(np.array([], dtype=np.int64)),
        test_retain=data.take(np.concatenate([pools["test"], pools["unlearn"]])),
        scenario=spec,
        calib_forget=calib_forget,
    )


# ---------------------------------------------------------------------------
# k-means


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (
        (points**2).sum(1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids**2).sum(1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    # argmin returns the first minimum, i.e. the lowest centroid index on ties
    assign = d2.argmin(axis=1)
    return assign, d2[np.arange(points.shape[0]), assign]


def _seed_centroids(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; take unused ones in order
            unused = np.setdiff1d(np.arange(n), chosen)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(1))
    return points[chosen].copy()


def kmeans(points, k: int, max_iters: int = 100, seed: int = 0, return_inertia: bool = False):
    """Lloyd iteration with k-means++ seeding.

    Returns ``(assignments, centroids)``; with ``return_inertia`` a third
    element lists the total within-cluster squared distance after each
    assignment step.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = points.shape[0]
    if int(k) != k or k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if max_iters < 1:
        raise ValueError("max_iters must be positive")
    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(points, int(k), rng)
    assign, d2 = _nearest(points, centroids)
    inertia = [float(d2.sum())]
    for _ in range(max_iters):
        new = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_assign, d2 = _nearest(points, new)
        centroids = new
        inertia.append(float(d2.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    if return_inertia:
        return assign, centroids, inertia
    return assign, centroids


# ---------------------------------------------------------------------------
# text table format


def save_dataset(data: Dataset, path) -> None:
    lines = [f"# dims={data.n_dims} classes={data.n_classes}"]
    for i in range(len(data)):
        feats = ",".join(f"{v:.9g}" for v in data.features[i])
        lines.append(f"{data.ids[i]},{data.labels[i]},{feats}" if feats else f"{data.ids[i]},{data.labels[i]}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError("missing '# dims=<d> classes=<k>' header")
    header = dict(tok.split("=") for tok in text[0][1:].split())
    dims, classes = int(header["dims"]), int(header["classes"])
    rows = [line.split(",") for line in text[1:] if line.strip()]
    for r in rows:
        if len(r) != dims + 2:
            raise ValueError(f"expected {dims + 2} fields, got {len(r)}")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), dims)
    return Dataset(feats, labels, ids, classes)
