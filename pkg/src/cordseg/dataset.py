"""Dataset index (subject records with split assignments) and the
subject-level train/val/test splitter."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingDataError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    contrast: str
    image: str
    cord_mask: str
    lesion_mask: str | None
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetIndex:
    """Subject records plus the directory paths are resolved against."""

    subjects: list
    root: Path = Path(".")

    def by_split(self, split: str):
        return [s for s in self.subjects if s.split == split]

    def resolve(self, relpath: str | None) -> Path | None:
        if relpath is None:
            return None
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p

    def save(self, path: str | Path) -> None:
        payload = {
            "subjects": [
                {
                    "id": s.id,
                    "contrast": s.contrast,
                    "image": s.image,
                    "cord_mask": s.cord_mask,
                    "lesion_mask": s.lesion_mask,
                    "split": s.split,
                }
                for s in self.subjects
            ]
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetIndex":
        path = Path(path)
        if not path.exists():
            raise MissingDataError(f"dataset index not found: {path}")
        payload = json.loads(path.read_text())
        subjects = [
            SubjectRecord(
                id=e["id"],
                contrast=e["contrast"],
                image=e["image"],
                cord_mask=e["cord_mask"],
                lesion_mask=e.get("lesion_mask"),
                split=e["split"],
            )
            for e in payload["subjects"]
        ]
        return cls(subjects, root=path.parent)


def split_dataset(subject_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict:
    """Disjoint subject-level split; deterministic given the seed.

    val/test sizes are floored (bumped to 1 when their fraction is
    positive); the remainder goes to train. Raises when there are too few
    subjects for every requested split to be non-empty.
    """
    ids = list(subject_ids)
    n = len(ids)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three values summing to 1, got {fractions}")
    counts = {}
    for name, frac in zip(("val", "test"), fractions[1:]):
        c = int(n * frac)
        if frac > 0 and c == 0:
            c = 1
        counts[name] = c
    n_train = n - counts["val"] - counts["test"]
    if n_train <= 0 and fractions[0] > 0:
        raise ConfigError(f"too few subjects ({n}) for a non-empty split")

    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(n)]
    assignment = {}
    pos = 0
    for name in ("val", "test"):
        for sid in order[pos : pos + counts[name]]:
            assignment[sid] = name
        pos += counts[name]
    for sid in order[pos:]:
        assignment[sid] = "train"
    return assignment
