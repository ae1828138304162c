"""Synthetic ellipsoid phantoms: deterministic, learnable, desk-sized.

Each foreground class paints 1..n axis-aligned ellipsoid blobs; later
classes overwrite earlier ones where blobs overlap.  Intensity is the
class index times a step plus Gaussian noise, with step > sigma enforced
so the segmentation task stays learnable.  Generation retries with a
deterministic sub-seed until every class occupies at least one voxel, so
the output is still a pure function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SpecError

_MAX_ATTEMPTS = 100


@dataclass
class PhantomSpec:
    volume: int = 32
    classes: int = 4
    blobs_min: int = 1
    blobs_max: int = 3
    radius_min: float = 3.0
    radius_max: float = 7.0
    noise_sigma: float = 0.1
    intensity_step: float = 1.0

    def __post_init__(self):
        if self.volume < 2 or self.classes < 1:
            raise SpecError("phantom needs a volume and at least one class")
        if self.blobs_min < 0 or self.blobs_max < self.blobs_min:
            raise SpecError("blob count range is inverted")
        if self.radius_min <= 0 or self.radius_max < self.radius_min:
            raise SpecError("blob radius range is invalid")
        if 2 * self.radius_max > self.volume:
            raise SpecError(f"blob radius {self.radius_max} exceeds volume "
                            f"{self.volume}")
        if self.noise_sigma >= self.intensity_step:
            raise SpecError("intensity separation must exceed the noise sigma")

    @classmethod
    def from_config(cls, cfg) -> "PhantomSpec":
        return cls(volume=cfg["data.volume"], classes=cfg["data.classes"],
                   blobs_min=cfg["data.blobs_min"], blobs_max=cfg["data.blobs_max"],
                   radius_min=cfg["data.radius_min"], radius_max=cfg["data.radius_max"],
                   noise_sigma=cfg["data.noise_sigma"],
                   intensity_step=cfg["data.intensity_step"])


def _paint(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.volume
    grid = np.arange(n, dtype=np.float64)
    gd, gh, gw = np.meshgrid(grid, grid, grid, indexing="ij")
    labels = np.zeros((n, n, n), dtype=np.uint16)
    for c in range(1, spec.classes + 1):
        blobs = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
        for _ in range(blobs):
            radii = rng.uniform(spec.radius_min, spec.radius_max, size=3)
            center = np.array([rng.uniform(r, n - r) for r in radii])
            dist = (((gd - center[0]) / radii[0]) ** 2
                    + ((gh - center[1]) / radii[1]) ** 2
                    + ((gw - center[2]) / radii[2]) ** 2)
            labels[dist <= 1.0] = c  # later classes overwrite earlier ones
    return labels


def gen_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (intensity float32 (1,D,H,W), labels uint16 (D,H,W))."""
    if spec.blobs_min == 0 and spec.blobs_max == 0:
        labels = np.zeros((spec.volume,) * 3, dtype=np.uint16)
    else:
        labels = None
        for attempt in range(_MAX_ATTEMPTS):
            rng = np.random.default_rng([seed, attempt])
            candidate = _paint(spec, rng)
            present = np.unique(candidate)
            if all(c in present for c in range(1, spec.classes + 1)):
                labels = candidate
                break
        if labels is None:
            raise SpecError(f"could not place all {spec.classes} classes "
                            f"in {_MAX_ATTEMPTS} attempts (seed {seed})")
    noise_rng = np.random.default_rng([seed, 777_001])
    intensity = (labels.astype(np.float64) * spec.intensity_step
                 + noise_rng.normal(0.0, spec.noise_sigma, size=labels.shape))
    return intensity[None].astype(np.float32), labels
