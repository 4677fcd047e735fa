"""Fixed affine feedback policies: averaging, clustering and selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, MissingHour, SchemaError, ShapeMismatch

LIBRARY_VERSION = 1


@dataclass(frozen=True)
class AffinePolicy:
    """Gains ``gains[k-1] = M_k`` mapping the previous disturbance to a power offset."""

    gains: np.ndarray           # (N, Np, Nd+Ny)
    anchor_hour: int = 0
    direction: str = "up"

    def __post_init__(self):
        g = np.array(self.gains, dtype=float)
        if g.ndim != 3:
            raise DimensionMismatch(f"gains must be a 3-d array (N, Np, Nr), got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("policy gains must be finite")
        if self.direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "anchor_hour", int(self.anchor_hour) % 24)

    @property
    def N(self) -> int:
        return self.gains.shape[0]

    def check_shape(self, N, np_, nr):
        if self.gains.shape != (N, np_, nr):
            raise DimensionMismatch(f"policy gains have shape {self.gains.shape}, expected {(N, np_, nr)}")

    @classmethod
    def zeros(cls, N, np_, nr, anchor_hour=0, direction="up"):
        return cls(np.zeros((N, np_, nr)), anchor_hour, direction)

    def to_dict(self) -> dict:
        return {"gains": self.gains.tolist(), "anchor_hour": self.anchor_hour, "direction": self.direction}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["gains"], float), doc.get("anchor_hour", 0), doc.get("direction", "up"))


def policy_distance(M_a, M_b) -> tuple[float, float]:
    """Mean and max over timesteps of the Frobenius distance between gains."""
    a = M_a.gains if isinstance(M_a, AffinePolicy) else np.asarray(M_a, float)
    b = M_b.gains if isinstance(M_b, AffinePolicy) else np.asarray(M_b, float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"policy shapes differ: {a.shape} vs {b.shape}")
    per_step = np.sqrt(((a - b) ** 2).reshape(a.shape[0], -1).sum(axis=1))
    return float(per_step.mean()), float(per_step.max())


def average_policy(policies, anchor_hour=None, direction=None) -> AffinePolicy:
    policies = list(policies)
    if not policies:
        raise ValueError("need at least one policy to average")
    shapes = {p.gains.shape for p in policies}
    if len(shapes) != 1:
        raise ShapeMismatch(f"cannot average policies of shapes {sorted(shapes)}")
    gains = np.mean([p.gains for p in policies], axis=0)
    return AffinePolicy(gains,
                        policies[0].anchor_hour if anchor_hour is None else anchor_hour,
                        policies[0].direction if direction is None else direction)


def _optimal_policy(inp, direction):
    from .envelope import envelope_uaf_opt
    _, up, down = envelope_uaf_opt(inp)
    return up if direction == "up" else down


def train_average_policy(instances, direction: str, hour: int = 0, solve=None) -> AffinePolicy:
    """Entry-wise mean of the optimal gains over the training instances.

    ``solve(inp, direction)`` may be supplied to reuse cached optima.
    """
    from .errors import SolverFailure

    instances = list(instances)
    if not instances:
        raise ValueError("train_average_policy needs at least one training instance")
    solve = solve or _optimal_policy
    pols = []
    for i, inp in enumerate(instances):
        try:
            pols.append(solve(inp, direction))
        except SolverFailure as exc:
            raise SolverFailure(f"training instance {i}: {exc}", exc.status) from exc
    return average_policy(pols, hour, direction)


# --- clustering --------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    history: list = field(default_factory=list)   # within-cluster sum of squares per iteration

    def __iter__(self):
        return iter((self.centers, self.labels))


def _wcss(X, centers, labels):
    return float(((X - centers[labels]) ** 2).sum())


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)    # argmin returns the lowest index on ties


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Hand-rolled rather than taken from scikit-learn so that the per-iteration
    objective is available and tie handling is fixed.
    """
    X = np.atleast_2d(np.asarray(points, float))
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must lie in 1..{n}, got {k}")
    if np.unique(X, axis=0).shape[0] < k:
        raise DegenerateInput(f"fewer than {k} distinct points")
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        centers.append(X[rng.choice(n, p=d2 / d2.sum())])
    centers = np.array(centers)
    labels = _assign(X, centers)
    history = [_wcss(X, centers, labels)]
    for _ in range(max_iter):
        for j in range(k):
            members = X[labels == j]
            if members.size:
                centers[j] = members.mean(axis=0)
        new = _assign(X, centers)
        history.append(_wcss(X, centers, new))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(centers, labels, history)


def weather_features(forecast) -> np.ndarray:
    """Per-channel mean and std plus the minimum of channel 0 (outdoor temperature)."""
    f = np.atleast_2d(np.asarray(forecast, float))
    return np.concatenate([f.mean(axis=0), f.std(axis=0), [f[:, 0].min()]])


@dataclass(frozen=True)
class FeatureScaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, F):
        F = np.atleast_2d(np.asarray(F, float))
        sd = F.std(axis=0)
        return cls(F.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, F):
        return (np.asarray(F, float) - self.mean) / self.scale


# --- library ---------------------------------------------------------------

@dataclass
class PolicyLibrary:
    """Policies keyed by (hour, direction).

    Each entry is a list of ``(center, policy)`` pairs; averaged mode stores a
    single pair with ``center=None``.
    """

    mode: str = "average"
    entries: dict = field(default_factory=dict)
    scaler: FeatureScaler | None = None
    metadata: dict = field(default_factory=dict)

    def add(self, hour, direction, policy, center=None):
        self.entries.setdefault((int(hour) % 24, direction), []).append(
            (None if center is None else np.asarray(center, float), policy))

    def hours(self):
        return sorted({h for h, _ in self.entries})

    def to_dict(self) -> dict:
        doc = {"version": LIBRARY_VERSION, "mode": self.mode, "metadata": self.metadata, "entries": []}
        if self.scaler is not None:
            doc["scaler"] = {"mean": self.scaler.mean.tolist(), "scale": self.scaler.scale.tolist()}
        for (hour, direction), items in sorted(self.entries.items()):
            for idx, (center, pol) in enumerate(items):
                doc["entries"].append({
                    "hour": hour, "direction": direction, "cluster": idx,
                    "center": None if center is None else center.tolist(),
                    "policy": pol.to_dict(),
                })
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("version") != LIBRARY_VERSION:
            raise SchemaError(f"unsupported policy library version {doc.get('version')!r}")
        lib = cls(doc.get("mode", "average"), metadata=doc.get("metadata", {}))
        if "scaler" in doc:
            lib.scaler = FeatureScaler(np.array(doc["scaler"]["mean"]), np.array(doc["scaler"]["scale"]))
        for e in sorted(doc["entries"], key=lambda e: (e["hour"], e["direction"], e["cluster"])):
            lib.add(e["hour"], e["direction"], AffinePolicy.from_dict(e["policy"]), e["center"])
        return lib

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def select_policy(library: PolicyLibrary, hour: int, features=None, direction: str = "up") -> AffinePolicy:
    key = (int(hour) % 24, direction)
    if key not in library.entries:
        raise MissingHour(f"policy library has no {direction} entry for hour {hour}")
    items = library.entries[key]
    if len(items) == 1 or features is None:
        return items[0][1]
    f = np.asarray(features, float)
    if library.scaler is not None:
        f = library.scaler.transform(f)
    d2 = [float(((c - f) ** 2).sum()) for c, _ in items]
    return items[int(np.argmin(d2))][1]


def train_cluster_policies(instances, features, k: int, seed: int = 0, hour: int = 0,
                           solve=None) -> PolicyLibrary:
    """Cluster days by standardized weather features and keep the optimum of
    the member closest to each center."""
    instances = list(instances)
    F = np.atleast_2d(np.asarray(features, float))
    if F.shape[0] != len(instances):
        raise ShapeMismatch("one feature vector per training instance is required")
    solve = solve or _optimal_policy
    scaler = FeatureScaler.fit(F)
    Z = scaler.transform(F)
    res = kmeans(Z, k, seed)
    lib = PolicyLibrary("cluster", scaler=scaler,
                        metadata={"samples": len(instances), "seed": seed, "k": k})
    for j in range(k):
        members = np.flatnonzero(res.labels == j)
        if not members.size:
            continue
        d2 = ((Z[members] - res.centers[j]) ** 2).sum(axis=1)
        rep = members[int(np.argmin(d2))]
        for direction in ("up", "down"):
            lib.add(hour, direction, solve(instances[rep], direction), res.centers[j])
    return lib
