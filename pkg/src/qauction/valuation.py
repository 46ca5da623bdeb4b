"""Action bundles and Q-value derived bundle valuations.

Converts per-host, per-action long-term utility estimates (Q-values) into
normalized valuation profiles over all non-empty action bundles, optionally
bending the additive sum with submodular or supermodular curvature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

DEFAULT_ACTIONS = ("Analyze", "Remove", "Restore")
HOST_TYPES = ("User", "Enterprise", "Operator", "Defender")
CURVATURE_KINDS = ("additive", "submodular", "supermodular")

DEFAULT_NORM_EPS = 1e-8


@dataclass(frozen=True)
class ActionCatalog:
    """Ordered set of defensive action identifiers.

    The order is canonical for a dataset: bundle bitmasks assign bit k to
    ``actions[k]``.
    """

    actions: tuple[str, ...] = DEFAULT_ACTIONS

    def __post_init__(self):
        if len(self.actions) == 0:
            raise InvalidInputError("action catalog must not be empty")
        if len(set(self.actions)) != len(self.actions):
            raise InvalidInputError(f"duplicate action names in {self.actions}")

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Bundle:
    """A non-empty subset of the action catalog, encoded as a bitmask."""

    mask: int

    def __post_init__(self):
        if self.mask <= 0:
            raise InvalidInputError("bundles are non-empty; the null outcome is not a Bundle")

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")

    def action_indices(self) -> tuple[int, ...]:
        return tuple(k for k in range(self.mask.bit_length()) if self.mask >> k & 1)

    def contains(self, action_index: int) -> bool:
        return bool(self.mask >> action_index & 1)


@dataclass(frozen=True)
class BundleIndex:
    """All non-empty bundles of a catalog, in ascending-bitmask order."""

    catalog: ActionCatalog
    bundles: tuple[Bundle, ...] = field(init=False)

    def __post_init__(self):
        masks = range(1, 1 << len(self.catalog))
        object.__setattr__(self, "bundles", tuple(Bundle(m) for m in masks))

    @property
    def num_bundles(self) -> int:
        return len(self.bundles)

    @property
    def num_actions(self) -> int:
        return len(self.catalog)

    def label(self, j: int) -> str:
        """Human-readable column label, e.g. ``Analyze+Remove``."""
        names = self.catalog.actions
        return "+".join(names[k] for k in self.bundles[j].action_indices())

    def labels(self) -> list[str]:
        return [self.label(j) for j in range(self.num_bundles)]

    def sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.bundles], dtype=np.int64)

    def columns_containing(self, action_index: int) -> np.ndarray:
        """Bundle positions whose bundle includes the given action."""
        return np.array(
            [j for j, b in enumerate(self.bundles) if b.contains(action_index)],
            dtype=np.int64,
        )

    def membership_matrix(self) -> np.ndarray:
        """|A| x M boolean matrix: row a marks the bundles containing action a."""
        out = np.zeros((self.num_actions, self.num_bundles), dtype=bool)
        for a in range(self.num_actions):
            out[a, self.columns_containing(a)] = True
        return out


def enumerate_bundles(catalog: ActionCatalog) -> BundleIndex:
    """All 2^|A| - 1 non-empty action subsets in ascending-bitmask order."""
    return BundleIndex(catalog)


@dataclass(frozen=True)
class QMatrix:
    """Per-host, per-action long-term utility estimates (raw, may be negative)."""

    values: np.ndarray
    host_ids: tuple[str, ...]
    host_types: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2 or values.shape[0] < 1:
            raise InvalidInputError(f"Q matrix must be 2-D with n >= 1 hosts, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Q matrix contains non-finite entries")
        n = values.shape[0]
        if len(self.host_ids) != n or len(self.host_types) != n:
            raise InvalidInputError("host_ids/host_types length must match the number of rows")

    @property
    def num_hosts(self) -> int:
        return self.values.shape[0]

    @property
    def num_actions(self) -> int:
        return self.values.shape[1]


def default_host_labels(n: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    ids = tuple(f"host{i}" for i in range(n))
    types = tuple("User" for _ in range(n))
    return ids, types


def q_from_value_advantage(state_values, advantages, host_ids=None, host_types=None) -> QMatrix:
    """Recombine a critic's value/advantage decomposition: Q[i, k] = V[i] + A[i, k]."""
    v = np.asarray(state_values, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    if v.ndim != 1 or a.ndim != 2 or a.shape[0] != v.shape[0]:
        raise InvalidInputError(
            f"shape mismatch: state values {v.shape} vs advantages {a.shape}"
        )
    q = v[:, None] + a
    n = q.shape[0]
    auto_ids, auto_types = default_host_labels(n)
    return QMatrix(
        values=q,
        host_ids=tuple(host_ids) if host_ids is not None else auto_ids,
        host_types=tuple(host_types) if host_types is not None else auto_types,
    )


@dataclass(frozen=True)
class CurvatureSpec:
    """How bundle values deviate from the additive sum of per-action Q-values.

    ``theta`` is the interaction strength (lambda for submodular, mu for
    supermodular); zero makes every kind coincide with additive.
    """

    kind: str = "additive"
    theta: float = 0.1
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in CURVATURE_KINDS:
            raise InvalidInputError(f"unknown curvature kind {self.kind!r}; expected one of {CURVATURE_KINDS}")
        if not (self.theta >= 0.0):
            raise InvalidInputError("theta must be non-negative")
        if self.noise_seed < 0:
            raise InvalidInputError("noise_seed must be a non-negative integer")

    @property
    def sign(self) -> float:
        if self.kind == "submodular":
            return -1.0
        if self.kind == "supermodular":
            return 1.0
        return 0.0


def curvature_noise(noise_seed: int, host: int, bundle_mask: int, sample_key: int = 0) -> float:
    """One uniform [0, 1) draw keyed by (seed, sample, host, bundle).

    Keyed seeding makes regeneration order-independent: the draw for a given
    coordinate never depends on which other coordinates were generated.
    """
    ss = np.random.SeedSequence((noise_seed, sample_key, host, bundle_mask))
    return float(np.random.Generator(np.random.PCG64(ss)).random())


def bundle_value(q_row, bundle: Bundle, spec: CurvatureSpec, eps_draw: float) -> float:
    """Value of one bundle for one host under the given curvature.

    additive:     sum of the member Q-values
    submodular:   sum - theta * (|S|-1)^2 * eps_draw
    supermodular: sum + theta * (|S|-1)^2 * eps_draw
    """
    if not (0.0 <= eps_draw <= 1.0):
        raise InvalidInputError(f"eps_draw must lie in [0, 1], got {eps_draw}")
    q_row = np.asarray(q_row, dtype=np.float64)
    base = float(q_row[list(bundle.action_indices())].sum())
    curve = spec.sign * spec.theta * (bundle.size - 1) ** 2 * eps_draw
    return base + curve


def build_profile(q: QMatrix, spec: CurvatureSpec, index: BundleIndex, sample_key: int = 0) -> np.ndarray:
    """Raw n x M bundle-valuation matrix for one sample.

    Deterministic given (q, spec, index, sample_key): the noise draw for entry
    (i, S) is keyed by (noise_seed, sample_key, i, bitmask of S).
    """
    if q.num_actions != index.num_actions:
        raise InvalidInputError(
            f"Q matrix has {q.num_actions} action columns but the index expects {index.num_actions}"
        )
    n, m = q.num_hosts, index.num_bundles
    sizes = index.sizes()
    member = index.membership_matrix()  # |A| x M
    base = q.values @ member.astype(np.float64)  # (n, M) additive sums
    if spec.kind == "additive" or spec.theta == 0.0:
        if spec.kind == "additive":
            return base
        # theta == 0: curvature term vanishes but keep the same code path
    out = base.copy()
    weight = spec.sign * spec.theta * (sizes - 1).astype(np.float64) ** 2
    for i in range(n):
        for j, b in enumerate(index.bundles):
            if weight[j] == 0.0:
                continue
            out[i, j] += weight[j] * curvature_noise(spec.noise_seed, i, b.mask, sample_key)
    return out


def minmax_scale(x, eps: float = DEFAULT_NORM_EPS) -> np.ndarray:
    """Global min-max scaling: (x - min) / (max - min + eps).

    Applied over the whole array, so relative ranking is preserved; a constant
    array maps to all zeros (eps keeps the denominator positive).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("cannot normalize non-finite values")
    if not (eps > 0):
        raise InvalidInputError("eps must be positive")
    lo = x.min()
    hi = x.max()
    return (x - lo) / (hi - lo + eps)


@dataclass(frozen=True)
class ValuationProfile:
    """Normalized n x M bundle valuations for one auction instance."""

    values: np.ndarray
    bundle_index: BundleIndex
    host_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        n, m = values.shape
        if m != self.bundle_index.num_bundles:
            raise InvalidInputError("value columns do not match the bundle index")
        if len(self.host_ids) != n:
            raise InvalidInputError("host_ids length must match rows")
        if values.min() < 0.0 or values.max() > 1.0:
            raise InvalidInputError("normalized valuations must lie in [0, 1]")


def normalize_profile(raw, index: BundleIndex, host_ids=None, eps: float = DEFAULT_NORM_EPS) -> ValuationProfile:
    """Min-max normalize one raw profile matrix into a ValuationProfile."""
    scaled = minmax_scale(raw, eps=eps)
    if host_ids is None:
        host_ids = tuple(f"host{i}" for i in range(scaled.shape[0]))
    return ValuationProfile(values=scaled, bundle_index=index, host_ids=tuple(host_ids))


@dataclass(frozen=True)
class ValuationDataset:
    """A stack of normalized valuation samples sharing one bundle index.

    ``samples`` has shape (S, n, M) with every entry in [0, 1]; ``raw_min`` and
    ``raw_max`` record the pre-normalization value range for provenance.
    """

    samples: np.ndarray
    bundle_index: BundleIndex
    host_ids: tuple[str, ...]
    host_types: tuple[str, ...]
    raw_min: float = 0.0
    raw_max: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 3:
            raise InvalidInputError(f"samples must be (S, n, M), got shape {samples.shape}")
        if samples.shape[2] != self.bundle_index.num_bundles:
            raise InvalidInputError("sample columns do not match the bundle index")
        n = samples.shape[1]
        if len(self.host_ids) != n or len(self.host_types) != n:
            raise InvalidInputError("host label lengths must match the host dimension")

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_hosts(self) -> int:
        return self.samples.shape[1]

    @property
    def num_bundles(self) -> int:
        return self.samples.shape[2]


def generate_dataset(
    q: QMatrix,
    spec: CurvatureSpec,
    index: BundleIndex,
    n_samples: int,
    eps: float = DEFAULT_NORM_EPS,
    per_instance: bool = False,
) -> ValuationDataset:
    """Draw ``n_samples`` curvature-noise realizations and normalize.

    Normalization is global over the pooled dataset by default (all samples
    share one min/max); ``per_instance=True`` rescales each sample separately
    for ablation.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    raw = np.stack([build_profile(q, spec, index, sample_key=s) for s in range(n_samples)])
    raw_min, raw_max = float(raw.min()), float(raw.max())
    if per_instance:
        scaled = np.stack([minmax_scale(raw[s], eps=eps) for s in range(n_samples)])
    else:
        scaled = minmax_scale(raw, eps=eps)
    return ValuationDataset(
        samples=scaled,
        bundle_index=index,
        host_ids=q.host_ids,
        host_types=q.host_types,
        raw_min=raw_min,
        raw_max=raw_max,
    )
