"""Synthetic label noise with exact flag bookkeeping.

All generators pick exactly ``floor(ratio * n)`` samples uniformly without
replacement and record ``true_label`` (the label before corruption) and
``flag`` (1 where the label was changed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dyndetect.dynamics import LabeledDataset
from dyndetect.errors import InvalidArgumentError

KINDS = ("symmetric", "asymmetric", "superclass")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    ratio: float
    seed: int = 0
    class_to_group: dict[int, int] | None = field(default=None, compare=False)
    exclude_self: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= float(self.ratio) <= 1.0:
            raise InvalidArgumentError(f"ratio must be in [0, 1], got {self.ratio}")
        if self.class_to_group is not None:
            object.__setattr__(self, "class_to_group", {int(k): int(v) for k, v in self.class_to_group.items()})
        if self.kind == "superclass":
            if not self.class_to_group:
                raise InvalidArgumentError("superclass noise requires class_to_group")
            sizes: dict[int, int] = {}
            for g in self.class_to_group.values():
                sizes[g] = sizes.get(g, 0) + 1
            small = sorted(g for g, s in sizes.items() if s < 2)
            if small:
                raise InvalidArgumentError(f"superclass groups need >= 2 classes; group(s) {small} too small")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "ratio": self.ratio, "seed": self.seed}
        if self.class_to_group is not None:
            d["class_to_group"] = {str(k): v for k, v in sorted(self.class_to_group.items())}
        if not self.exclude_self:
            d["exclude_self"] = False
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        c2g = d.get("class_to_group")
        if isinstance(c2g, (str, Path)):
            c2g = load_class_to_group(c2g)
        return cls(
            kind=d["kind"],
            ratio=float(d["ratio"]),
            seed=int(d.get("seed", 0)),
            class_to_group=c2g,
            exclude_self=bool(d.get("exclude_self", True)),
        )


def load_class_to_group(path) -> dict[int, int]:
    with open(path, encoding="utf-8") as fh:
        return {int(k): int(v) for k, v in json.load(fh).items()}


def _check_clean(dataset: LabeledDataset):
    if dataset.flags is not None:
        raise InvalidArgumentError("dataset already carries noise flags")
    if dataset.num_classes < 2:
        raise InvalidArgumentError("noise injection needs at least 2 classes")


def _choose(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    count = math.floor(ratio * n)
    return np.sort(rng.choice(n, size=count, replace=False))


def _finish(dataset: LabeledDataset, new_labels: np.ndarray) -> LabeledDataset:
    original = dataset.labels
    flags = (new_labels != original).astype(np.int64)
    return dataset.with_labels(new_labels, true_labels=original.copy(), flags=flags)


def inject_symmetric(dataset: LabeledDataset, ratio: float, seed: int, exclude_self: bool = True) -> LabeledDataset:
    """Relabel ``floor(ratio * n)`` samples uniformly at random.

    With ``exclude_self`` (default) the draw is over the C-1 other classes, so
    every chosen sample is corrupted. Otherwise it is over all C classes and a
    chosen sample may keep its label (its flag then stays 0).
    """
    _check_clean(dataset)
    NoiseSpec("symmetric", ratio)
    rng = np.random.default_rng(seed)
    chosen = _choose(len(dataset), ratio, rng)
    labels = dataset.labels.copy()
    c = dataset.num_classes
    if exclude_self:
        offsets = rng.integers(1, c, size=chosen.size)
        labels[chosen] = (labels[chosen] + offsets) % c
    else:
        labels[chosen] = rng.integers(0, c, size=chosen.size)
    return _finish(dataset, labels)


def inject_asymmetric(dataset: LabeledDataset, ratio: float, seed: int) -> LabeledDataset:
    """Move ``floor(ratio * n)`` samples to the adjacent class ``(y + 1) mod C``."""
    _check_clean(dataset)
    NoiseSpec("asymmetric", ratio)
    rng = np.random.default_rng(seed)
    chosen = _choose(len(dataset), ratio, rng)
    labels = dataset.labels.copy()
    labels[chosen] = (labels[chosen] + 1) % dataset.num_classes
    return _finish(dataset, labels)


def inject_superclass(dataset: LabeledDataset, ratio: float, class_to_group: dict[int, int], seed: int) -> LabeledDataset:
    """Symmetric noise restricted to each sample's own class group."""
    _check_clean(dataset)
    c2g = {int(k): int(v) for k, v in class_to_group.items()}
    missing = sorted(set(range(dataset.num_classes)) - set(c2g))
    if missing:
        raise InvalidArgumentError(f"class_to_group is not total; missing classes {missing}")
    members: dict[int, list[int]] = {}
    for cls in sorted(c2g):
        members.setdefault(c2g[cls], []).append(cls)
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgumentError(f"ratio must be in [0, 1], got {ratio}")

    rng = np.random.default_rng(seed)
    chosen = _choose(len(dataset), ratio, rng)
    labels = dataset.labels.copy()
    offsets = rng.random(chosen.size)
    for idx, u in zip(chosen, offsets):
        y = int(labels[idx])
        alternatives = [c for c in members[c2g[y]] if c != y]
        if not alternatives:
            raise InvalidArgumentError(f"class {y} is alone in group {c2g[y]}; cannot corrupt within group")
        labels[idx] = alternatives[int(u * len(alternatives))]
    return _finish(dataset, labels)


def inject(dataset: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    if spec.kind == "symmetric":
        return inject_symmetric(dataset, spec.ratio, spec.seed, exclude_self=spec.exclude_self)
    if spec.kind == "asymmetric":
        return inject_asymmetric(dataset, spec.ratio, spec.seed)
    return inject_superclass(dataset, spec.ratio, spec.class_to_group, spec.seed)


def contaminate_twice(dataset: LabeledDataset, underlying: NoiseSpec, synthesized: NoiseSpec) -> LabeledDataset:
    """Apply ``underlying`` then ``synthesized`` noise.

    The first pass's flags are kept only as ``underlying_flags``; the second
    pass treats the already-corrupted labels as ground truth, so ``flags``
    (the supervision channel) marks only the synthesized corruption.
    """
    first = inject(dataset, underlying)
    hidden = first.flags
    stripped = LabeledDataset(first.features, first.labels, first.num_classes)
    second = inject(stripped, synthesized)
    return LabeledDataset(
        second.features,
        second.labels,
        second.num_classes,
        true_labels=second.true_labels,
        flags=second.flags,
        underlying_flags=hidden,
    )


def cifar100_superclasses() -> dict[int, int]:
    """The 20 CIFAR-100 coarse groups of 5 fine classes (alphabetical fine-label ids)."""
    fine = [
        4, 1, 14, 8, 0, 6, 7, 7, 18, 3, 3, 14, 9, 18, 7, 11, 3, 9, 7, 11,
        6, 11, 5, 10, 7, 6, 13, 15, 3, 15, 0, 11, 1, 10, 12, 14, 16, 9, 11, 5,
        5, 19, 8, 8, 15, 13, 14, 17, 18, 10, 16, 4, 17, 4, 2, 0, 17, 4, 18, 17,
        10, 3, 2, 12, 12, 16, 12, 1, 9, 19, 2, 10, 0, 1, 16, 12, 9, 13, 15, 13,
        16, 19, 2, 4, 6, 19, 5, 5, 8, 19, 18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
    ]
    return {c: g for c, g in enumerate(fine)}


def contiguous_groups(num_classes: int, group_size: int) -> dict[int, int]:
    if num_classes % group_size:
        raise InvalidArgumentError("num_classes must be a multiple of group_size")
    return {c: c // group_size for c in range(num_classes)}
