"""Synthetic multi-domain data, the linked/shared class split protocol,
CSV ingestion/export, and deterministic batch sampling.

A dataset is columnar: features (n, d), integer labels, integer domain
ids, and stable integer sample ids. The synthetic generator draws one
prototype vector per class and one transform + offset per domain, then
emits ``samples_per_cell`` noisy transformed prototypes per
(class, domain) cell, so every class is expressed in every domain until
a split plan restricts availability.

A split plan designates one target domain and partitions the class set
into *linked* classes (each available in exactly one source domain) and
*shared* classes (each available in all but one source domain). Linked
and shared classes are assigned to domains round-robin over a seeded
domain order, which guarantees no single source domain expresses the
full class set.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    CsvFormatError,
    DegenerateInputError,
    PlanMismatchError,
)
from .seeding import rng_for

TRANSFORM_FAMILIES = ("rotation", "affine", "channel_bias")

# preset shared-class counts (low, high) for benchmark class-set sizes
# whose published splits do not follow the 1/3 and 2/3 rounding rule
_SHARED_PRESETS = {5: (2, 4), 7: (3, 5), 65: (25, 50)}


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    domain: int
    id: int


@dataclass
class Dataset:
    """Columnar sample store. ids are stable across subsetting."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        for name, arr in (("labels", self.labels), ("domains", self.domains),
                          ("ids", self.ids)):
            if arr.shape != (n,):
                raise ContractError(f"{name} shape {arr.shape} does not match {n} samples")
        if not np.isfinite(self.features).all():
            raise ContractError("features contain non-finite values")
        if n and (self.labels.min() < 0 or self.domains.min() < 0):
            raise ContractError("labels and domains must be non-negative")

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def class_set(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))

    def domain_set(self) -> set[int]:
        return set(int(s) for s in np.unique(self.domains))

    def sample(self, i: int) -> Sample:
        return Sample(features=self.features[i].copy(), label=int(self.labels[i]),
                      domain=int(self.domains[i]), id=int(self.ids[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(features=self.features[idx], labels=self.labels[idx],
                       domains=self.domains[idx], ids=self.ids[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry of the generated multi-domain mixture.

    shift controls how far each domain's transform strays from the
    identity (0 makes every domain identical); noise_std is the feature
    noise; label_noise is the probability a sample's label is replaced
    by a uniformly random other class.
    """

    num_classes: int
    input_dim: int
    num_domains: int = 4
    transform_family: str = "affine"
    shift: float = 1.0
    noise_std: float = 0.1
    label_noise: float = 0.0
    samples_per_cell: int = 40
    prototype_seed: int | None = None

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError(f"num_domains must be >= 2, got {self.num_domains}")
        if self.num_classes < 3:
            raise ConfigError(f"num_classes must be >= 3, got {self.num_classes}")
        if self.input_dim < 2:
            raise ConfigError(f"input_dim must be >= 2, got {self.input_dim}")
        if self.transform_family not in TRANSFORM_FAMILIES:
            raise ConfigError(
                f"transform_family must be one of {TRANSFORM_FAMILIES}, "
                f"got {self.transform_family!r}"
            )
        if self.shift < 0:
            raise ConfigError(f"shift must be >= 0, got {self.shift}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if self.samples_per_cell < 1:
            raise ConfigError("samples_per_cell must be >= 1")


@dataclass
class SyntheticDataset(Dataset):
    """Generated dataset plus the latent quantities it was built from."""

    spec: SyntheticSpec = None
    seed: int = 0
    prototypes: np.ndarray = None    # (num_classes, d)
    transforms: np.ndarray = None    # (num_domains, d, d)
    offsets: np.ndarray = None       # (num_domains, d)


def _domain_transform(family: str, d: int, shift: float, rng: np.random.Generator):
    """One (matrix, offset) pair; both reduce to (I, 0) at shift 0."""
    if family == "rotation":
        mat = np.eye(d)
        for i in range(d // 2):
            angle = shift * rng.uniform(-1.0, 1.0)
            c, s = np.cos(angle), np.sin(angle)
            giv = np.eye(d)
            p, q = 2 * i, 2 * i + 1
            giv[p, p] = c
            giv[q, q] = c
            giv[p, q] = -s
            giv[q, p] = s
            mat = giv @ mat
        return mat, np.zeros(d)
    if family == "affine":
        mat = np.eye(d) + (shift / np.sqrt(d)) * rng.normal(size=(d, d))
        offset = (shift / np.sqrt(d)) * rng.normal(size=d)
        return mat, offset
    # channel_bias: identity mixing, per-coordinate additive shift only
    return np.eye(d), shift * rng.normal(size=d)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """Class-balanced multi-domain mixture; deterministic given seed.

    x = A_s @ mu_c + offset_s + eps with eps ~ N(0, noise_std^2 I);
    rows are emitted in (domain, class) order with ids 0..n-1.
    """
    d, c_n, k = spec.input_dim, spec.num_classes, spec.num_domains
    proto_seed = spec.prototype_seed if spec.prototype_seed is not None else seed
    prototypes = rng_for(proto_seed, "prototypes").normal(size=(c_n, d))

    transforms = np.empty((k, d, d))
    offsets = np.empty((k, d))
    for s in range(k):
        transforms[s], offsets[s] = _domain_transform(
            spec.transform_family, d, spec.shift, rng_for(seed, "domain", s))

    noise_rng = rng_for(seed, "noise")
    flip_rng = rng_for(seed, "labelnoise")
    per_cell = spec.samples_per_cell
    n = k * c_n * per_cell
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    row = 0
    for s in range(k):
        for c in range(c_n):
            base = transforms[s] @ prototypes[c] + offsets[s]
            eps = noise_rng.normal(size=(per_cell, d)) * spec.noise_std
            features[row:row + per_cell] = base + eps
            labels[row:row + per_cell] = c
            domains[row:row + per_cell] = s
            row += per_cell
    if spec.label_noise > 0.0:
        flips = flip_rng.random(n) < spec.label_noise
        deltas = flip_rng.integers(1, c_n, size=n)
        labels = np.where(flips, (labels + deltas) % c_n, labels)

    return SyntheticDataset(features=features, labels=labels, domains=domains,
                            ids=np.arange(n, dtype=np.int64), spec=spec, seed=int(seed),
                            prototypes=prototypes, transforms=transforms, offsets=offsets)


@dataclass(frozen=True)
class SplitPlan:
    """Which classes each source domain expresses, plus the held-out target."""

    target_domain: int
    source_domains: tuple[int, ...]
    shared_classes: frozenset[int]
    linked_classes: frozenset[int]
    assignment: dict[int, frozenset[int]] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "source_domains", tuple(sorted(int(s) for s in self.source_domains)))
        object.__setattr__(self, "shared_classes", frozenset(int(c) for c in self.shared_classes))
        object.__setattr__(self, "linked_classes", frozenset(int(c) for c in self.linked_classes))
        object.__setattr__(self, "assignment",
                           {int(c): frozenset(int(s) for s in doms)
                            for c, doms in self.assignment.items()})
        self.validate()

    @property
    def classes(self) -> frozenset[int]:
        return self.shared_classes | self.linked_classes

    def validate(self) -> None:
        k = len(self.source_domains)
        if self.target_domain in self.source_domains:
            raise ContractError("target domain listed among source domains")
        if self.shared_classes & self.linked_classes:
            raise ContractError("shared and linked class sets overlap")
        if set(self.assignment) != set(self.classes):
            raise ContractError("assignment does not cover the class set exactly")
        if not self.shared_classes or not self.linked_classes:
            raise ContractError("both class groups must be non-empty")
        for c in self.linked_classes:
            if len(self.assignment[c]) != 1:
                raise ContractError(f"linked class {c} assigned to {len(self.assignment[c])} domains")
        for c in self.shared_classes:
            if len(self.assignment[c]) != k - 1:
                raise ContractError(
                    f"shared class {c} assigned to {len(self.assignment[c])} domains, "
                    f"expected {k - 1}")
        for c, doms in self.assignment.items():
            if not doms <= set(self.source_domains):
                raise ContractError(f"class {c} assigned outside the source domains")
        for s in self.source_domains:
            if all(s in self.assignment[c] for c in self.classes):
                raise ContractError(f"source domain {s} expresses every class")

    def to_json(self) -> str:
        doc = {
            "target_domain": self.target_domain,
            "source_domains": list(self.source_domains),
            "shared_classes": sorted(self.shared_classes),
            "linked_classes": sorted(self.linked_classes),
            "assignment": {str(c): sorted(self.assignment[c]) for c in sorted(self.assignment)},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        doc = json.loads(text)
        return cls(target_domain=doc["target_domain"],
                   source_domains=tuple(doc["source_domains"]),
                   shared_classes=frozenset(doc["shared_classes"]),
                   linked_classes=frozenset(doc["linked_classes"]),
                   assignment={int(c): frozenset(v) for c, v in doc["assignment"].items()})

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SplitPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def shared_class_count(num_classes: int, setting) -> int:
    """Size of the shared group for a named setting or an explicit count.

    Named settings aim at 1/3 ("low") and 2/3 ("high") shared classes,
    with presets for the benchmark sizes whose published counts deviate
    from plain rounding.
    """
    if isinstance(setting, bool):
        raise ConfigError("setting must be 'low', 'high', or an integer count")
    if isinstance(setting, (int, np.integer)):
        n_s = int(setting)
    else:
        name = str(setting).lower()
        if name not in ("low", "high"):
            raise ConfigError(f"setting must be 'low', 'high', or an integer, got {setting!r}")
        if num_classes in _SHARED_PRESETS:
            n_s = _SHARED_PRESETS[num_classes][0 if name == "low" else 1]
        else:
            frac = 1.0 / 3.0 if name == "low" else 2.0 / 3.0
            n_s = int(round(frac * num_classes))
            n_s = min(max(n_s, 1), num_classes - 1)
    if n_s < 1 or n_s >= num_classes:
        raise ConfigError(
            f"shared class count {n_s} invalid for {num_classes} classes "
            f"(need 1 <= count <= {num_classes - 1})")
    return n_s


def make_split_plan(classes, num_domains: int, target_domain: int, setting, seed) -> SplitPlan:
    """Seeded draw of a linked/shared split and its domain assignment.

    The class list is shuffled once to pick the shared group, and the
    source-domain order is shuffled once. Linked class j lands on source
    domain order[j mod K]; shared class j is expressed everywhere except
    order[j mod K]. Placing the first linked class on the same position
    the first shared class avoids keeps every source domain short of the
    full class set.
    """
    classes = sorted(int(c) for c in classes)
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate class ids")
    n = len(classes)
    if n < 3:
        raise ConfigError(f"need at least 3 classes, got {n}")
    if num_domains < 3:
        raise ConfigError(f"need at least 3 domains (2 sources), got {num_domains}")
    if not 0 <= target_domain < num_domains:
        raise ConfigError(f"target_domain {target_domain} outside [0, {num_domains})")
    n_s = shared_class_count(n, setting)

    rng = rng_for(seed, "split")
    order = list(np.array(classes)[rng.permutation(n)])
    shared = [int(c) for c in order[:n_s]]
    linked = [int(c) for c in order[n_s:]]
    sources = [s for s in range(num_domains) if s != target_domain]
    dom_order = list(np.array(sources)[rng.permutation(len(sources))])
    k = len(sources)

    assignment: dict[int, frozenset[int]] = {}
    for j, c in enumerate(linked):
        assignment[c] = frozenset({int(dom_order[j % k])})
    for j, c in enumerate(shared):
        excluded = int(dom_order[j % k])
        assignment[c] = frozenset(s for s in sources if s != excluded)

    return SplitPlan(target_domain=int(target_domain), source_domains=tuple(sources),
                     shared_classes=frozenset(shared), linked_classes=frozenset(linked),
                     assignment=assignment)


def apply_split(dataset: Dataset, plan: SplitPlan):
    """(source training pool, held-out target test set).

    The pool keeps sample (x, y, s) iff s is a source domain that the
    plan assigns class y to; the target set keeps every target-domain
    sample. Availability restriction applies only to source domains.
    """
    data_classes = dataset.class_set()
    plan_classes = set(plan.classes)
    if not data_classes <= plan_classes:
        missing = sorted(data_classes - plan_classes)
        raise PlanMismatchError(f"dataset classes {missing} absent from the plan")
    plan_domains = set(plan.source_domains) | {plan.target_domain}
    extra = dataset.domain_set() - plan_domains
    if extra:
        raise PlanMismatchError(f"dataset domains {sorted(extra)} absent from the plan")

    keep = np.zeros(len(dataset), dtype=bool)
    for c in plan_classes:
        allowed = np.isin(dataset.domains, sorted(plan.assignment[c]))
        keep |= (dataset.labels == c) & allowed
    source_pool = dataset.subset(np.flatnonzero(keep))
    target_set = dataset.subset(np.flatnonzero(dataset.domains == plan.target_domain))
    return source_pool, target_set


def split_train_val(dataset: Dataset, seed, train_fraction: float = 0.8):
    """Per-domain shuffled split; each domain keeps >= 1 sample per side
    whenever it has >= 2 samples."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train_idx: list[int] = []
    val_idx: list[int] = []
    for s in sorted(dataset.domain_set()):
        idx = np.flatnonzero(dataset.domains == s)
        perm = idx[rng_for(seed, "val-split", s).permutation(len(idx))]
        if len(perm) < 2:
            train_idx.extend(perm.tolist())
            continue
        n_train = int(round(train_fraction * len(perm)))
        n_train = min(max(n_train, 1), len(perm) - 1)
        train_idx.extend(perm[:n_train].tolist())
        val_idx.extend(perm[n_train:].tolist())
    return dataset.subset(np.array(sorted(train_idx), dtype=np.int64)), \
        dataset.subset(np.array(sorted(val_idx), dtype=np.int64))


def export_csv(dataset: Dataset, path, provenance: dict | None = None) -> None:
    """Write `id,domain,label,f0..f{d-1}` rows; floats via repr so the
    ingest round trip is bit-exact. Optional provenance JSON rides along
    as a leading comment line."""
    d = dataset.input_dim
    header = "id,domain,label," + ",".join(f"f{j}" for j in range(d))
    with open(path, "w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        fh.write(header + "\n")
        for i in range(len(dataset)):
            feats = ",".join(repr(float(v)) for v in dataset.features[i])
            fh.write(f"{int(dataset.ids[i])},{int(dataset.domains[i])},"
                     f"{int(dataset.labels[i])},{feats}\n")


def ingest_csv(path) -> Dataset:
    """Parse a dataset CSV; '#' lines are comments. Errors carry the
    1-based line number. Warns when per-class counts differ by > 10x."""
    rows: list[tuple[int, int, int, np.ndarray]] = []
    d = None
    header_seen = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split(",")
            if not header_seen:
                if len(parts) < 4 or parts[:3] != ["id", "domain", "label"]:
                    raise CsvFormatError(
                        "header must start with id,domain,label,f0,...", line=lineno)
                expect = [f"f{j}" for j in range(len(parts) - 3)]
                if parts[3:] != expect:
                    raise CsvFormatError(
                        f"feature columns must be f0..f{len(parts) - 4}", line=lineno)
                d = len(parts) - 3
                if d < 1:
                    raise CsvFormatError("no feature columns", line=lineno)
                header_seen = True
                continue
            if len(parts) != d + 3:
                raise CsvFormatError(
                    f"expected {d + 3} fields, found {len(parts)}", line=lineno)
            try:
                sid, dom, lab = int(parts[0]), int(parts[1]), int(parts[2])
                feats = np.array([float(v) for v in parts[3:]])
            except ValueError as exc:
                raise CsvFormatError(f"unparsable value ({exc})", line=lineno) from None
            if not np.isfinite(feats).all():
                raise CsvFormatError("non-finite feature value", line=lineno)
            if dom < 0 or lab < 0:
                raise CsvFormatError("domain and label must be non-negative", line=lineno)
            rows.append((sid, dom, lab, feats))
    if not header_seen:
        raise CsvFormatError("missing header")
    if not rows:
        raise CsvFormatError("no data rows")
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        raise CsvFormatError("duplicate sample ids")
    dataset = Dataset(features=np.stack([r[3] for r in rows]),
                      labels=np.array([r[2] for r in rows], dtype=np.int64),
                      domains=np.array([r[1] for r in rows], dtype=np.int64),
                      ids=ids)
    counts = np.unique(dataset.labels, return_counts=True)[1]
    if len(counts) > 1 and counts.max() > 10 * counts.min():
        warnings.warn(
            f"class counts span {counts.min()}..{counts.max()} (> 10x imbalance)",
            stacklevel=2)
    return dataset


class BatchSampler:
    """Deterministic epoch batching over a source pool.

    Pooled mode shuffles all indices per epoch and chunks them (last
    short chunk kept). Stratified mode shuffles within each domain and
    deals indices into the epoch sequence proportionally to domain
    sizes, so each batch approximates the pool's domain mix.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed, stratified: bool = False):
        if len(dataset) == 0:
            raise DegenerateInputError("cannot sample batches from an empty pool")
        if batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = seed
        self.stratified = bool(stratified)

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = rng_for(self.seed, "epoch", epoch)
        n = len(self.dataset)
        if not self.stratified:
            return rng.permutation(n)
        queues = []
        for s in sorted(self.dataset.domain_set()):
            idx = np.flatnonzero(self.dataset.domains == s)
            queues.append(idx[rng.permutation(len(idx))].tolist())
        sizes = np.array([len(q) for q in queues], dtype=np.float64)
        taken = np.zeros(len(queues))
        order = np.empty(n, dtype=np.int64)
        for t in range(n):
            # largest remaining fraction, ties to the lowest domain index
            deficit = sizes / sizes.sum() * (t + 1) - taken
            pick = -1
            for q in np.argsort(-deficit, kind="stable"):
                if queues[q]:
                    pick = int(q)
                    break
            order[t] = queues[pick].pop(0)
            taken[pick] += 1
        return order

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        order = self._epoch_order(epoch)
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
