"""Structure-of-arrays container for the anisotropic Gaussian primitives.

Parameters are stored in their unconstrained optimization domain: log scales,
rotation quaternions (renormalized after every optimizer step), opacity
logits, and degree-0 color logits. Activated values (sigmoid / exp) are
derived on demand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")


def sigmoid(x):
    # tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Splats:
    positions: np.ndarray  # (N,3) world meters
    log_scales: np.ndarray  # (N,3) log-meters
    rotations: np.ndarray  # (N,4) unit quaternions (w,x,y,z)
    opacity_logits: np.ndarray  # (N,)
    color_logits: np.ndarray  # (N,3) degree-0 color logits

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "color_logits": (n, 3),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise ValueError(f"{name}: expected shape {want}, got {got}")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "Splats":
        return cls(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros((0,)),
            color_logits=np.zeros((0, 3)),
        )

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def base_colors(self) -> np.ndarray:
        """Degree-0 RGB in (0,1): logistic of the stored color logits."""
        return sigmoid(self.color_logits)

    def normalize_rotations(self):
        n = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, n, out=self.rotations)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def select(self, mask_or_idx) -> "Splats":
        return Splats(**{name: getattr(self, name)[mask_or_idx].copy() for name in PARAM_NAMES})

    def copy(self) -> "Splats":
        return Splats(**{name: getattr(self, name).copy() for name in PARAM_NAMES})

    @staticmethod
    def concatenate(parts: list["Splats"]) -> "Splats":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Splats.empty()
        return Splats(
            **{
                name: np.concatenate([getattr(p, name) for p in parts], axis=0)
                for name in PARAM_NAMES
            }
        )


def random_splats(
    n: int,
    rng: np.random.Generator,
    center: np.ndarray | None = None,
    radius: float = 1.0,
    opacity: float = 0.1,
) -> Splats:
    """Uniform random splats in a cube of half-side ``radius`` around ``center``.

    Scales follow the nearest-neighbor heuristic used for harvested points.
    """
    center = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    positions = center + rng.uniform(-radius, radius, size=(n, 3))
    log_scales = np.full((n, 3), np.log(max(radius, 1e-6) * 2.0 / max(n, 1) ** (1 / 3)))
    if n >= 4:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(positions).query(positions, k=4)
        mean_d = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
        log_scales = np.repeat(np.log(mean_d)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return Splats(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.full(n, float(logit(opacity))),
        color_logits=logit(rng.uniform(0.25, 0.75, size=(n, 3))),
    )
