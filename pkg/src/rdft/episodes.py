"""Few-shot datasets, class splits, episode sampling and rotational division."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, SamplingError, UnsupportedConfigurationError

SHOT_RESTRICTION = "rotational division fine-tuning requires more than 1 shot per class (K >= 2)"


@dataclass(frozen=True)
class FewShotDataset:
    """Immutable feature table. Class ids are strings."""

    features: np.ndarray  # [N, *feature_shape]
    labels: tuple[str, ...]
    class_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ContractError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        index: dict[str, list[int]] = {}
        for i, lab in enumerate(self.labels):
            index.setdefault(str(lab), []).append(i)
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        object.__setattr__(self, "class_index", {k: tuple(v) for k, v in index.items()})
        self.features.setflags(write=False)

    @property
    def classes(self) -> list[str]:
        return list(self.class_index)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def __len__(self):
        return len(self.labels)

    def with_features(self, features) -> "FewShotDataset":
        return FewShotDataset(np.asarray(features), self.labels)


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple[str, ...]
    val_classes: tuple[str, ...]
    test_classes: tuple[str, ...]

    def __post_init__(self):
        parts = [set(self.train_classes), set(self.val_classes), set(self.test_classes)]
        for a in range(3):
            for b in range(a + 1, 3):
                common = parts[a] & parts[b]
                if common:
                    raise ConfigError(f"class {sorted(common)[0]!r} appears in two splits")

    def check_against(self, dataset: FewShotDataset):
        known = set(dataset.classes)
        for c in (*self.train_classes, *self.val_classes, *self.test_classes):
            if c not in known:
                raise ConfigError(f"split references unknown class {c!r}")


def make_split(classes, seed: int, fractions=(0.6, 0.2, 0.2)) -> ClassSplit:
    """Shuffle ``classes`` under ``seed`` and cut into train/val/test by ``fractions``."""
    classes = [str(c) for c in classes]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not np.isclose(sum(fractions), 1.0):
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(classes))
    shuffled = [classes[i] for i in order]
    n_train = int(round(fractions[0] * len(classes)))
    n_val = int(round(fractions[1] * len(classes)))
    return ClassSplit(tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_val]),
                      tuple(shuffled[n_train + n_val:]))


def write_split_file(path, split: ClassSplit) -> None:
    lines = []
    for name, classes in (("train", split.train_classes), ("val", split.val_classes),
                          ("test", split.test_classes)):
        lines.append(f"[{name}]")
        lines.extend(classes)
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_file(path) -> ClassSplit:
    """Parse ``[train]`` / ``[val]`` / ``[test]`` sections, one class id per line."""
    sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    current = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise ConfigError(f"{path}:{lineno}: unknown split section {line}")
            continue
        if current is None:
            raise ConfigError(f"{path}:{lineno}: class id before any section header")
        sections[current].append(line)
    return ClassSplit(tuple(sections["train"]), tuple(sections["val"]), tuple(sections["test"]))


@dataclass(frozen=True)
class Episode:
    """C-way-K-shot episode. Row ``c`` of support/query holds class ``class_ids[c]``."""

    support: np.ndarray  # [C, K, *feature_shape]
    query: np.ndarray    # [C, Q, *feature_shape]
    class_ids: tuple[str, ...]
    seed: int = 0
    support_indices: np.ndarray | None = field(default=None, compare=False, repr=False)
    query_indices: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def way(self) -> int:
        return self.support.shape[0]

    @property
    def shot(self) -> int:
        return self.support.shape[1]

    @property
    def query_count(self) -> int:
        return self.query.shape[1]

    def flat_support(self):
        return flatten_block(self.support)

    def flat_query(self):
        return flatten_block(self.query)


def flatten_block(block):
    """[C, K, ...] -> ([C*K, ...], labels) with labels 0..C-1 repeated K times."""
    C, K = block.shape[:2]
    return block.reshape(C * K, *block.shape[2:]), np.repeat(np.arange(C), K)


def derive_seed(global_seed: int, component: str, counter: int = 0) -> int:
    """Stable 63-bit seed for (global seed, named component, counter)."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(component.encode()), int(counter)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sample_episode(dataset: FewShotDataset, classes, C: int, K: int, Q: int,
                   rng_seed: int) -> Episode:
    classes = [str(c) for c in classes]
    if len(classes) < C:
        raise SamplingError(f"need {C} classes but only {len(classes)} available")
    rng = np.random.default_rng(rng_seed)
    chosen = [classes[i] for i in rng.choice(len(classes), size=C, replace=False)]
    sup, qry = [], []
    for c in chosen:
        pool = dataset.class_index.get(c, ())
        if len(pool) < K + Q:
            raise SamplingError(
                f"class {c!r} has {len(pool)} samples, needs K+Q={K + Q} "
                f"(short by {K + Q - len(pool)})"
            )
        picked = np.asarray(pool)[rng.choice(len(pool), size=K + Q, replace=False)]
        sup.append(picked[:K])
        qry.append(picked[K:])
    sup_idx, qry_idx = np.stack(sup), np.stack(qry)
    return Episode(
        support=dataset.features[sup_idx],
        query=dataset.features[qry_idx],
        class_ids=tuple(chosen),
        seed=int(rng_seed),
        support_indices=sup_idx,
        query_indices=qry_idx,
    )


def episode_stream(dataset, classes, C, K, Q, global_seed, component="train", start=0):
    """Endless reproducible episode generator; episode ``i`` uses ``derive_seed(.., i)``."""
    i = start
    while True:
        yield sample_episode(dataset, classes, C, K, Q, derive_seed(global_seed, component, i))
        i += 1


def sample_episodes(dataset, classes, C, K, Q, global_seed, count, component="test"):
    return [sample_episode(dataset, classes, C, K, Q, derive_seed(global_seed, component, i))
            for i in range(count)]


def rdft_divide(support, j: int):
    """Hold out shot ``j`` of every class as a [C, 1] fake query; keep the rest [C, K-1]."""
    K = support.shape[1]
    if K < 2:
        raise UnsupportedConfigurationError(f"K={K}: {SHOT_RESTRICTION}")
    if not 0 <= j < K:
        raise ContractError(f"rotation index j={j} outside [0, {K})")
    keep = [i for i in range(K) if i != j]
    return support[:, keep], support[:, j:j + 1]


def rdft_rotations(support):
    if support.shape[1] < 2:
        raise UnsupportedConfigurationError(f"K={support.shape[1]}: {SHOT_RESTRICTION}")
    return [rdft_divide(support, j) for j in range(support.shape[1])]
