"""Shared data containers and their JSON wire format."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box

__all__ = [
    "GroundTruth",
    "PromptPool",
    "ProposalSet",
    "SCENE_JSON_KEYS",
    "scene_to_json",
    "scene_from_json",
]

SCENE_JSON_KEYS = ("d", "K", "T", "boxes", "features", "class_embeddings", "prompt_pool", "gt")


@dataclass(frozen=True)
class GroundTruth:
    """An annotated object: its box and class."""

    box: Box
    class_id: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative: {self.class_id}")


@dataclass(frozen=True)
class PromptPool:
    """Per-class bank of prompt embeddings, shape (K, T, d)."""

    embeddings: np.ndarray

    def __post_init__(self) -> None:
        e = self.embeddings
        if not isinstance(e, np.ndarray) or e.ndim != 3:
            raise ValueError("embeddings must be a (K, T, d) array")
        if e.shape[0] < 2 or e.shape[1] < 1 or e.shape[2] < 2:
            raise ValueError(f"need K >= 2, T >= 1, d >= 2: {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("embeddings must be finite")

    @property
    def num_classes(self) -> int:
        return self.embeddings.shape[0]

    @property
    def pool_size(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class ProposalSet:
    """One image's candidate boxes, region features, and class embeddings."""

    boxes: np.ndarray             # (N, 4) as x1, y1, x2, y2
    features: np.ndarray          # (N, d)
    class_embeddings: np.ndarray  # (K, d)

    def __post_init__(self) -> None:
        b, v, t = self.boxes, self.features, self.class_embeddings
        if b.ndim != 2 or b.shape[1] != 4:
            raise ValueError(f"boxes must be (N, 4): {b.shape}")
        if v.ndim != 2 or v.shape[0] != b.shape[0]:
            raise ValueError(f"features must be (N, d): {v.shape} for {b.shape[0]} boxes")
        if t.ndim != 2 or t.shape[1] != v.shape[1] or t.shape[0] < 2 or t.shape[1] < 2:
            raise ValueError(f"class embeddings must be (K>=2, d>=2): {t.shape}")
        for arr in (b, v, t):
            if not np.all(np.isfinite(arr)):
                raise ValueError("arrays must be finite")
        if b.shape[0] and not (np.all(b[:, 0] < b[:, 2]) and np.all(b[:, 1] < b[:, 3])):
            raise ValueError("every box needs x1 < x2 and y1 < y2")

    @property
    def n(self) -> int:
        return self.boxes.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def box_objects(self) -> list[Box]:
        return [Box(*row) for row in self.boxes.tolist()]


def scene_to_json(proposals: ProposalSet, pool: PromptPool, gts: list[GroundTruth]) -> dict:
    """Serialize one scene to the documented JSON layout."""
    if pool.num_classes != proposals.num_classes or pool.d != proposals.d:
        raise ValueError("prompt pool does not match the proposal set")
    return {
        "d": proposals.d,
        "K": proposals.num_classes,
        "T": pool.pool_size,
        "boxes": proposals.boxes.tolist(),
        "features": proposals.features.tolist(),
        "class_embeddings": proposals.class_embeddings.tolist(),
        "prompt_pool": pool.embeddings.tolist(),
        "gt": [
            {"box": [gt.box.x1, gt.box.y1, gt.box.x2, gt.box.y2], "class_id": gt.class_id}
            for gt in gts
        ],
    }


def scene_from_json(doc: dict) -> tuple[ProposalSet, PromptPool, list[GroundTruth]]:
    """Parse the documented scene layout; unknown or missing keys are rejected."""
    if set(doc) != set(SCENE_JSON_KEYS):
        missing = sorted(set(SCENE_JSON_KEYS) - set(doc))
        unknown = sorted(set(doc) - set(SCENE_JSON_KEYS))
        raise ValueError(f"bad scene keys: missing {missing}, unknown {unknown}")
    d, num_classes, pool_size = int(doc["d"]), int(doc["K"]), int(doc["T"])
    boxes = np.asarray(doc["boxes"], dtype=float).reshape(-1, 4)
    features = np.asarray(doc["features"], dtype=float).reshape(-1, d)
    class_embeddings = np.asarray(doc["class_embeddings"], dtype=float)
    pool = np.asarray(doc["prompt_pool"], dtype=float)
    if class_embeddings.shape != (num_classes, d):
        raise ValueError(f"class_embeddings must be ({num_classes}, {d}): {class_embeddings.shape}")
    if pool.shape != (num_classes, pool_size, d):
        raise ValueError(f"prompt_pool must be ({num_classes}, {pool_size}, {d}): {pool.shape}")
    gts = []
    for row in doc["gt"]:
        if set(row) != {"box", "class_id"}:
            raise ValueError(f"bad gt entry keys: {sorted(row)}")
        gts.append(GroundTruth(box=Box(*map(float, row["box"])), class_id=int(row["class_id"])))
    return (
        ProposalSet(boxes=boxes, features=features, class_embeddings=class_embeddings),
        PromptPool(embeddings=pool),
        gts,
    )
