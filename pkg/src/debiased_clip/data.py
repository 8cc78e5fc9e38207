"""Records, synthetic data with planted subgroups, augmentation, featurization and splits.

Two record types keep protected attributes away from training: :class:`Record`
carries them for evaluation, while :class:`TrainRecord` has no field that
could hold them. :func:`strip_attributes` is the only bridge between the two.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import PromptSet

DEFAULT_TEXT_DIM = 64
POSITIVE_PROMPT = "This image contains glaucoma"
NEGATIVE_PROMPT = "This image does not contain glaucoma"


@dataclass
class Record:
    id: str
    image_features: np.ndarray
    text: str | np.ndarray
    label: int
    attributes: dict[str, str] = field(default_factory=dict)

    def text_vector(self, q: int) -> np.ndarray:
        if isinstance(self.text, str):
            return hash_featurize(self.text, q)
        return np.asarray(self.text, dtype=np.float64)


@dataclass
class Dataset:
    records: list[Record]
    text_dim: int = DEFAULT_TEXT_DIM  # used to featurize raw notes

    def __post_init__(self) -> None:
        dims = {len(r.image_features) for r in self.records}
        if len(dims) > 1:
            raise ValueError(f"mixed image feature dimensions {sorted(dims)}")
        vec_dims = {len(r.text) for r in self.records if not isinstance(r.text, str)}
        if len(vec_dims) > 1:
            raise ValueError(f"mixed text feature dimensions {sorted(vec_dims)}")
        if vec_dims:
            self.text_dim = vec_dims.pop()
        for r in self.records:
            if r.label not in (0, 1):
                raise ValueError(f"record {r.id}: label must be 0 or 1, got {r.label}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def p(self) -> int:
        return len(self.records[0].image_features) if self.records else 0

    @property
    def q(self) -> int:
        return self.text_dim

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def images(self) -> np.ndarray:
        return np.array([r.image_features for r in self.records], dtype=np.float64)

    @property
    def texts(self) -> np.ndarray:
        return np.array([r.text_vector(self.q) for r in self.records], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=int)

    @property
    def has_notes(self) -> bool:
        return any(isinstance(r.text, str) for r in self.records)

    def attribute(self, name: str) -> np.ndarray:
        return np.array([r.attributes.get(name, "") for r in self.records], dtype=object)

    def attribute_names(self) -> list[str]:
        return sorted({k for r in self.records for k in r.attributes})

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.text_dim)


# ----------------------------------------------------------------------------
# training side of the attribute firewall
# ----------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class TrainRecord:
    id: str
    image_features: np.ndarray
    text_features: np.ndarray
    label: int


@dataclass(frozen=True)
class TrainingSet:
    """Attribute-free view of a dataset: features and labels only."""

    ids: tuple[str, ...]
    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.images.shape[1]

    @property
    def q(self) -> int:
        return self.texts.shape[1]

    def record(self, i: int) -> TrainRecord:
        return TrainRecord(self.ids[i], self.images[i], self.texts[i], int(self.labels[i]))


def strip_attributes(dataset: Dataset) -> TrainingSet:
    return TrainingSet(
        ids=tuple(dataset.ids),
        images=dataset.images,
        texts=dataset.texts,
        labels=dataset.labels,
    )


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------


@dataclass
class GroupSpec:
    proportion: float
    shift: float = 1.0  # distance of the group's image mean from the origin
    strength: float = 1.0  # class-signal strength in image space
    noise: float = 1.0
    name: str | None = None


@dataclass
class SyntheticSpec:
    n: int
    p: int
    q: int
    groups: list[GroupSpec]
    positive_rate: float = 0.5
    seed: int = 0
    text_strength: float = 1.0
    text_group_weight: float = 0.5
    attribute: str = "group"


def largest_remainder(n: int, fractions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to n, proportional to ``fractions``; ties go to the lower index."""
    fractions = np.asarray(fractions, dtype=np.float64)
    raw = n * fractions / fractions.sum()
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def synthetic_directions(p: int, q: int, n_groups: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7])
    return {
        "image_class": _unit(rng, p),
        "image_groups": np.array([_unit(rng, p) for _ in range(n_groups)]),
        "text_base": _unit(rng, q),
        "text_class": _unit(rng, q),
        "text_groups": np.array([_unit(rng, q) for _ in range(n_groups)]),
    }


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate paired image/text features with planted latent subgroups.

    For a record of group g and label y::

        image = shift_g * u_g + y * strength_g * c + noise_g * N(0, I_p)
        text  = base + y * text_strength * c_t + text_group_weight * shift_g * v_g
                + noise_g * N(0, I_q) / sqrt(q)

    Group sizes and per-group positives use largest-remainder allocation, so
    counts are exact. The true group is stored under ``spec.attribute``.
    """
    props = np.array([g.proportion for g in spec.groups], dtype=np.float64)
    if spec.n < 1:
        raise ValueError("n must be >= 1")
    if len(props) == 0 or np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"group proportions must be non-negative and sum to 1, got {props.tolist()}")
    if not 0.0 <= spec.positive_rate <= 1.0:
        raise ValueError("positive_rate must be in [0, 1]")

    dirs = synthetic_directions(spec.p, spec.q, len(spec.groups), spec.seed)
    rng = np.random.default_rng(spec.seed)
    sizes = largest_remainder(spec.n, props)

    group_idx, labels = [], []
    for g, size in enumerate(sizes):
        n_pos = largest_remainder(int(size), [spec.positive_rate, 1.0 - spec.positive_rate])[0]
        group_idx += [g] * int(size)
        labels += [1] * int(n_pos) + [0] * int(size - n_pos)
    group_idx = np.array(group_idx, dtype=int)
    labels = np.array(labels, dtype=int)
    order = rng.permutation(spec.n)
    group_idx, labels = group_idx[order], labels[order]

    records = []
    for i, (g, y) in enumerate(zip(group_idx, labels)):
        gs = spec.groups[g]
        image = gs.shift * dirs["image_groups"][g] + y * gs.strength * dirs["image_class"]
        image = image + gs.noise * rng.standard_normal(spec.p)
        text = (
            dirs["text_base"]
            + y * spec.text_strength * dirs["text_class"]
            + spec.text_group_weight * gs.shift * dirs["text_groups"][g]
            + gs.noise * rng.standard_normal(spec.q) / np.sqrt(spec.q)
        )
        name = gs.name if gs.name is not None else f"g{g}"
        records.append(Record(f"syn-{i:06d}", image, text, int(y), {spec.attribute: name}))
    return Dataset(records, spec.q)


def synthetic_prompts(spec: SyntheticSpec) -> PromptSet:
    """Class prompts matching the generator's noiseless text for each label."""
    dirs = synthetic_directions(spec.p, spec.q, len(spec.groups), spec.seed)
    neg = dirs["text_base"]
    pos = dirs["text_base"] + spec.text_strength * dirs["text_class"]
    return PromptSet(np.stack([neg, pos]), np.array([0, 1]))


def note_prompts(q: int) -> PromptSet:
    return PromptSet(
        np.stack([hash_featurize(NEGATIVE_PROMPT, q), hash_featurize(POSITIVE_PROMPT, q)]),
        np.array([0, 1]),
    )


def bias_preset(n: int = 1000, p: int = 16, q: int = 16, seed: int = 0,
                minority: float = 0.1, strength: float = 2.0) -> SyntheticSpec:
    """Majority/minority mix where the minority carries half the class signal."""
    return SyntheticSpec(
        n=n, p=p, q=q, seed=seed,
        groups=[
            GroupSpec(1.0 - minority, shift=2.0, strength=strength, noise=1.0, name="majority"),
            GroupSpec(minority, shift=2.0, strength=strength / 2, noise=1.0, name="minority"),
        ],
    )


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------


def augment_one(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    if strength < 0:
        raise ValueError("augmentation strength must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    noisy = x + strength * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= 0.1 * min(strength, 1.0)
    return noisy * keep


def augment(x: np.ndarray, strength: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two independent noisy, randomly masked views of ``x`` (a vector or a batch)."""
    return augment_one(x, strength, rng), augment_one(x, strength, rng)


@dataclass
class PairedBatch:
    """B records expanded into 2B augmented views.

    Views ``0..B-1`` are the first augmentation of each record and ``B..2B-1``
    the second, so ``pairing[i] = (i + B) mod 2B``.
    """

    images: np.ndarray  # (B, p) un-augmented features
    views: np.ndarray  # (2B, p)
    texts: np.ndarray  # (B, q)
    labels: np.ndarray  # (B,)
    pairing: np.ndarray  # (2B,)

    @property
    def size(self) -> int:
        return len(self.images)


def make_batch(train: TrainingSet, indices, strength: float, rng: np.random.Generator) -> PairedBatch:
    indices = np.asarray(indices, dtype=int)
    images = train.images[indices]
    first, second = augment(images, strength, rng)
    b = len(indices)
    return PairedBatch(
        images=images,
        views=np.concatenate([first, second]),
        texts=train.texts[indices],
        labels=train.labels[indices],
        pairing=(np.arange(2 * b) + b) % (2 * b),
    )


# ----------------------------------------------------------------------------
# note featurizer
# ----------------------------------------------------------------------------


def hash_featurize(note: str, q: int) -> np.ndarray:
    """Signed hashed bag of lowercase whitespace tokens, L2-normalized.

    Buckets come from blake2b digests, so vectors are stable across runs and
    platforms. An empty note gives the zero vector.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    vec = np.zeros(q)
    for token in note.lower().split():
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        h = int.from_bytes(digest, "little")
        vec[(h >> 1) % q] += 1.0 if h & 1 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# ----------------------------------------------------------------------------
# JSONL and splits
# ----------------------------------------------------------------------------


def record_to_json(r: Record) -> dict:
    out = {"id": r.id, "image_features": [float(v) for v in r.image_features]}
    if isinstance(r.text, str):
        out["text"] = r.text
    else:
        out["text_features"] = [float(v) for v in r.text]
    out["label"] = int(r.label)
    if r.attributes:
        out["attributes"] = dict(r.attributes)
    return out


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")


def load_jsonl(path, q: int = DEFAULT_TEXT_DIM, attributes: bool = True) -> Dataset:
    """Read one JSON record per line; ``q`` sizes the featurizer for raw notes.

    With ``attributes=False`` the attribute objects are never parsed.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if "text_features" in obj:
                    text = np.asarray(obj["text_features"], dtype=np.float64)
                else:
                    text = str(obj["text"])
                label = int(obj["label"])
                if label not in (0, 1):
                    raise ValueError(f"label must be 0 or 1, got {label}")
                records.append(Record(
                    id=str(obj["id"]),
                    image_features=np.asarray(obj["image_features"], dtype=np.float64),
                    text=text,
                    label=label,
                    attributes={str(k): str(v) for k, v in obj.get("attributes", {}).items()}
                    if attributes else {},
                ))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from exc
    return Dataset(records, q)


def split_indices(labels: np.ndarray, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Seeded, label-stratified partition of ``range(len(labels))``.

    Split sizes follow largest-remainder allocation of the fractions. Within
    each label, records are shuffled and spread evenly over a common rank
    axis, which is then cut into consecutive pieces.
    """
    labels = np.asarray(labels)
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    rng = np.random.default_rng(seed)
    n = len(labels)
    keys = np.empty(n)
    tiebreak = rng.random(n)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        keys[members] = (np.arange(len(members)) + 0.5) / len(members)
    order = np.lexsort((tiebreak, keys))
    bounds = np.concatenate([[0], np.cumsum(largest_remainder(n, fractions))])
    return [np.sort(order[bounds[i]:bounds[i + 1]]) for i in range(len(fractions))]


def split(dataset: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> list[Dataset]:
    return [dataset.subset(idx) for idx in split_indices(dataset.labels, fractions, seed)]


def load_prompts(path) -> PromptSet:
    return PromptSet.from_dict(json.loads(Path(path).read_text()))


def save_prompts(prompts: PromptSet, path) -> None:
    Path(path).write_text(json.dumps(prompts.to_dict()) + "\n")
