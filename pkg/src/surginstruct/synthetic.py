"""Synthetic surgical scenes: a verifiable stand-in for a real captioned image corpus.

Each scene has an instrument and a target structure placed on a square grid
of regions.  A region's feature vector is a one-hot code (structure type,
colour, presence; instrument type, presence) rotated by a fixed orthogonal
matrix, plus Gaussian noise.  The caption is a template instruction naming
the action implied by the instrument, the structure's colour and type, and
the quadrant it sits in.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

INSTRUMENTS = ("scissors", "clamp", "grasper", "cautery")
ACTIONS = {"scissors": "cut", "clamp": "clamp", "grasper": "grasp", "cautery": "cauterize"}
STRUCTURES = ("vessel", "tissue", "duct", "nerve")
COLORS = ("red", "blue", "yellow", "white")

# code layout inside the first CODE_DIM feature dimensions
_STRUCT0, _COLOR0, _PRESENT, _INSTR0, _INSTR_PRESENT = 0, 4, 8, 9, 13
CODE_DIM = 14


@dataclass(frozen=True)
class Scene:
    instrument: int
    structure: int
    color: int
    region: int
    instrument_region: int

    def to_dict(self) -> dict:
        return {"instrument": INSTRUMENTS[self.instrument], "structure": STRUCTURES[self.structure],
                "color": COLORS[self.color], "region": self.region,
                "instrument_region": self.instrument_region}


def quadrant_words(region: int, side: int) -> tuple[str, str]:
    row, col = divmod(region, side)
    return ("upper" if row < side / 2 else "lower"), ("left" if col < side / 2 else "right")


def caption(scene: Scene, side: int) -> str:
    vert, horiz = quadrant_words(scene.region, side)
    return (f"{ACTIONS[INSTRUMENTS[scene.instrument]]} the {COLORS[scene.color]} "
            f"{STRUCTURES[scene.structure]} in the {vert} {horiz}")


@lru_cache(maxsize=None)
def rotation(dim: int) -> np.ndarray:
    """Fixed orthogonal mixing matrix, identical for every dataset of this width."""
    q, r = np.linalg.qr(np.random.Generator(np.random.Philox(20210901)).standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    q.setflags(write=False)
    return q


def clean_grid(scene: Scene, n_regions: int, dim: int) -> np.ndarray:
    code = np.zeros((n_regions, dim))
    code[scene.region, _STRUCT0 + scene.structure] = 1.0
    code[scene.region, _COLOR0 + scene.color] = 1.0
    code[scene.region, _PRESENT] = 1.0
    code[scene.instrument_region, _INSTR0 + scene.instrument] = 1.0
    code[scene.instrument_region, _INSTR_PRESENT] = 1.0
    return code @ rotation(dim).T


def _check_shape(n_regions: int, dim: int) -> int:
    side = int(round(np.sqrt(n_regions)))
    if side * side != n_regions or side < 2:
        raise ValueError(f"n_regions must be a square >= 4, got {n_regions}")
    if dim < CODE_DIM:
        raise ValueError(f"feature dim must be >= {CODE_DIM}, got {dim}")
    return side


def synth_dataset(n: int, noise: float = 0.1, seed: int = 0, n_regions: int = 16, dim: int = 32):
    """``n`` scenes drawn uniformly; returns (records, scenes).

    Each record is a dict with ``id``, ``features`` (R x D) and ``caption``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    side = _check_shape(n_regions, dim)
    rng = np.random.Generator(np.random.Philox(int(seed)))
    records, scenes = [], []
    for i in range(n):
        region = int(rng.integers(n_regions))
        other = int(rng.integers(n_regions - 1))
        s = Scene(int(rng.integers(len(INSTRUMENTS))), int(rng.integers(len(STRUCTURES))),
                  int(rng.integers(len(COLORS))), region, other + (other >= region))
        feats = clean_grid(s, n_regions, dim) + noise * rng.standard_normal((n_regions, dim))
        records.append({"id": f"scene{i:05d}", "features": feats, "caption": caption(s, side)})
        scenes.append(s)
    return records, scenes


def recover_scene(features: np.ndarray) -> Scene:
    """Rule-based inverse: undo the rotation and read the codes by argmax."""
    n_regions, dim = features.shape
    _check_shape(n_regions, dim)
    code = features @ rotation(dim)
    region = int(np.argmax(code[:, _PRESENT]))
    instr_scores = code[:, _INSTR_PRESENT].copy()
    instr_scores[region] = -np.inf
    iregion = int(np.argmax(instr_scores))
    return Scene(int(np.argmax(code[iregion, _INSTR0:_INSTR0 + 4])),
                 int(np.argmax(code[region, _STRUCT0:_STRUCT0 + 4])),
                 int(np.argmax(code[region, _COLOR0:_COLOR0 + 4])), region, iregion)
