"""Keyframe bookkeeping: pairwise covisibility cache and the co-visible /
random split used to schedule map optimization."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import Keyframe

COVISIBLE_THRESHOLD = 0.70
RANDOM_FRACTION = 0.30


def cloud_overlap(points_a: np.ndarray, points_b: np.ndarray, dist: float) -> float:
    """Symmetrized fraction of points with a neighbour in the other cloud."""
    if len(points_a) == 0 or len(points_b) == 0:
        return 0.0
    da, _ = cKDTree(points_b).query(points_a, distance_upper_bound=dist)
    db, _ = cKDTree(points_a).query(points_b, distance_upper_bound=dist)
    return 0.5 * (float(np.isfinite(da).mean()) + float(np.isfinite(db).mean()))


@dataclass
class KeyframeStore:
    """Ordered keyframes plus their world-frame clouds and overlap cache.

    The cache is keyed by sorted keyframe-index pairs, so covisibility is
    symmetric by construction; the diagonal is implicitly 1.
    """

    overlap_dist: float = 0.1
    keyframes: list = field(default_factory=list)
    clouds: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.keyframes)

    def add(self, keyframe: Keyframe, world_points: np.ndarray) -> None:
        world_points = np.asarray(world_points, dtype=np.float64)
        for other, pts in zip(self.keyframes, self.clouds):
            key = (min(other.index, keyframe.index), max(other.index, keyframe.index))
            self._cache[key] = cloud_overlap(pts, world_points, self.overlap_dist)
        self.keyframes.append(keyframe)
        self.clouds.append(world_points)

    def covisibility(self, a: int, b: int) -> float:
        if a == b:
            return 1.0
        return self._cache[(min(a, b), max(a, b))]

    def contains(self, index: int) -> bool:
        return any(kf.index == index for kf in self.keyframes)


def select_keyframes(store: KeyframeStore, current: Keyframe, rng_seed: int,
                     strategy: str = "combined"):
    """Split the store into co-visible keyframes (> 70% overlap with the
    current one, which therefore always includes it) and a random sample of
    ceil(30%) of the rest, drawn without replacement and seeded from
    (rng_seed, current.index) so reruns reproduce the schedule.

    strategy narrows the result for ablations: `covisible` drops the random
    sample, `random` keeps only the current keyframe plus the sample (the
    current view is always optimized)."""
    if strategy not in ("combined", "covisible", "random"):
        raise ValueError("strategy must be combined, covisible, or random")
    if not store.contains(current.index):
        raise ValueError(f"keyframe {current.index} is not in the store")
    covisible, rest = [], []
    for kf in store.keyframes:
        if store.covisibility(kf.index, current.index) > COVISIBLE_THRESHOLD:
            covisible.append(kf)
        else:
            rest.append(kf)
    if strategy == "covisible":
        return covisible, []
    count = math.ceil(RANDOM_FRACTION * len(rest))
    randoms = []
    if count:
        rng = np.random.default_rng((rng_seed, current.index))
        pick = sorted(rng.choice(len(rest), size=count, replace=False))
        randoms = [rest[i] for i in pick]
    if strategy == "random":
        return [kf for kf in covisible if kf.index == current.index], randoms
    return covisible, randoms
