"""The learned combinatorial auction mechanism.

A permutation-equivariant transformer encoder reads one bid row per host (no
positional encodings anywhere), an allocation head turns logits into a
feasible probabilistic allocation via min-of-softmax caps, and a payment head
emits per-host price fractions, so individual rationality holds for truthful
reports by construction. Regret is estimated by projected gradient ascent on
per-agent misreports; training optimizes a revenue/regret trade-off with
adaptive-moment gradient steps.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, replace
from typing import Callable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, constant
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    DivergenceError,
    InternalInvariantError,
    InvalidInputError,
)
from .mechanism import MechanismOutcome
from .valuation import BundleIndex

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Encoder/head sizes. Small on purpose: it must train in minutes on CPU."""

    num_bundles: int
    d_model: int = 16
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 32

    def __post_init__(self):
        if self.num_bundles < 1:
            raise InvalidInputError("num_bundles must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise InvalidInputError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs: trade-off weight, misreport search effort, optimizer."""

    gamma: float = 0.5
    misreport_steps: int = 5
    misreport_lr: float = 0.15
    restarts: int = 2
    batch_size: int = 128
    iterations: int = 2000
    regret_batch: Optional[int] = 32
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidInputError("gamma must lie in [0, 1]")
        if self.misreport_steps < 0:
            raise InvalidInputError("misreport_steps must be >= 0")
        if self.restarts < 1 or self.batch_size < 1 or self.iterations < 1:
            raise InvalidInputError("restarts, batch_size and iterations must be >= 1")
        if self.regret_batch is not None and self.regret_batch < 1:
            raise InvalidInputError("regret_batch must be >= 1 when given")


@dataclass
class MetricsRecord:
    """One training iteration's telemetry. regret_mean is per agent per sample."""

    iteration: int
    revenue_mean: float
    regret_mean: float
    regret_max: float
    loss: float
    wallclock_ms: int

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "revenue_mean": self.revenue_mean,
            "regret_mean": self.regret_mean,
            "regret_max": self.regret_max,
            "loss": self.loss,
            "wallclock_ms": self.wallclock_ms,
        }


class ModelParams:
    """All weights of the mechanism, keyed by name, plus the architecture."""

    def __init__(self, hyper: ArchConfig, tensors: dict[str, np.ndarray]):
        self.hyper = hyper
        self.tensors = tensors

    @staticmethod
    def initialize(hyper: ArchConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.Generator(np.random.PCG64(seed))
        t: dict[str, np.ndarray] = {}

        def xavier(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        d, m = hyper.d_model, hyper.num_bundles
        t["embed.w"] = xavier(m, d)
        t["embed.b"] = np.zeros(d)
        for l in range(hyper.n_blocks):
            pre = f"blk{l}"
            t[f"{pre}.ln1.g"] = np.ones(d)
            t[f"{pre}.ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                t[f"{pre}.attn.{name}"] = xavier(d, d)
            for name in ("bq", "bk", "bv", "bo"):
                t[f"{pre}.attn.{name}"] = np.zeros(d)
            t[f"{pre}.ln2.g"] = np.ones(d)
            t[f"{pre}.ln2.b"] = np.zeros(d)
            t[f"{pre}.ff.w1"] = xavier(d, hyper.d_ff)
            t[f"{pre}.ff.b1"] = np.zeros(hyper.d_ff)
            t[f"{pre}.ff.w2"] = xavier(hyper.d_ff, d)
            t[f"{pre}.ff.b2"] = np.zeros(d)
        t["alloc.w"] = xavier(d, m + 1)
        t["alloc.b"] = np.zeros(m + 1)
        t["pay.w"] = xavier(d, 1)
        t["pay.b"] = np.zeros(1)
        return ModelParams(hyper, {k: np.ascontiguousarray(v) for k, v in t.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, {k: v.copy() for k, v in self.tensors.items()})

    def names(self) -> list[str]:
        return sorted(self.tensors)


def _as_param_tensors(params: ModelParams, tape: Optional[Tape]) -> dict[str, Tensor]:
    if tape is None:
        return {k: constant(v) for k, v in params.tensors.items()}
    return {k: tape.leaf(v) for k, v in sorted(params.tensors.items())}


def _encode_core(profiles: Tensor, p: Mapping[str, Tensor], hyper: ArchConfig) -> Tensor:
    """Transformer encoder over agent tokens; input (B, n, M) -> (B, n, d)."""
    b, n, _ = profiles.shape
    d, heads = hyper.d_model, hyper.n_heads
    dh = d // heads
    h = ad.linear(profiles, p["embed.w"], p["embed.b"])
    for l in range(hyper.n_blocks):
        pre = f"blk{l}"
        t = ad.layer_norm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = ad.linear(t, p[f"{pre}.attn.wq"], p[f"{pre}.attn.bq"])
        k = ad.linear(t, p[f"{pre}.attn.wk"], p[f"{pre}.attn.bk"])
        v = ad.linear(t, p[f"{pre}.attn.wv"], p[f"{pre}.attn.bv"])
        # (B, n, d) -> (B, heads, n, dh)
        q = ad.transpose(ad.reshape(q, (b, n, heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, n, heads, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, n, heads, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(dh))
        mixed = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        h = ad.add(h, ad.linear(merged, p[f"{pre}.attn.wo"], p[f"{pre}.attn.bo"]))
        t2 = ad.layer_norm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        f1 = ad.relu(ad.linear(t2, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"]))
        h = ad.add(h, ad.linear(f1, p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"]))
    return h


def _allocation_core(
    embeddings: Tensor, p: Mapping[str, Tensor], hyper: ArchConfig, index: BundleIndex
) -> Tensor:
    """Feasible probabilistic allocation (B, n, M) from embeddings.

    Row-softmax over bundles plus an explicit null column gives each agent a
    distribution; for every action, a softmax over all (agent, bundle) logits
    containing that action plus a dummy "unallocated" slot caps the action's
    total load at one. The final allocation is the elementwise min, so both
    constraint families hold by construction.
    """
    b, n, _ = embeddings.shape
    m = hyper.num_bundles
    logits = ad.linear(embeddings, p["alloc.w"], p["alloc.b"])  # (B, n, M+1)
    rows = ad.softmax(logits, axis=-1)
    x = ad.slice_axis(rows, 2, 0, m)
    dummy = constant(np.zeros((b, 1)))
    for a in range(index.num_actions):
        cols = index.columns_containing(a)
        k = cols.shape[0]
        sub = ad.take_axis(logits, 2, cols)  # (B, n, k)
        flat = ad.reshape(sub, (b, n * k))
        cap_flat = ad.softmax(ad.concat([flat, dummy], axis=1), axis=-1)
        caps = ad.reshape(ad.slice_axis(cap_flat, 1, 0, n * k), (b, n, k))
        cap_full = ad.scatter_axis(caps, 2, cols, m, fill=np.inf)
        x = ad.elementwise_min(x, cap_full)
    return x


def _payment_core(
    embeddings: Tensor, allocation: Tensor, profiles: Tensor, p: Mapping[str, Tensor]
) -> tuple[Tensor, Tensor]:
    """Price fractions and payments: p_i = sigmoid(w . e_i) * expected value."""
    b, n, _ = embeddings.shape
    ptilde = ad.sigmoid(ad.reshape(ad.linear(embeddings, p["pay.w"], p["pay.b"]), (b, n)))
    expected = ad.tensor_sum(ad.mul(allocation, profiles), axis=2)  # (B, n)
    return ptilde, ad.mul(ptilde, expected)


def _forward_core(
    profiles: Tensor, p: Mapping[str, Tensor], hyper: ArchConfig, index: BundleIndex
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(allocation, payments, price fractions, embeddings) for a batch."""
    emb = _encode_core(profiles, p, hyper)
    x = _allocation_core(emb, p, hyper, index)
    ptilde, pay = _payment_core(emb, x, profiles, p)
    return x, pay, ptilde, emb


def _check_profile(profile: np.ndarray, m: int) -> np.ndarray:
    profile = np.asarray(profile, dtype=np.float64)
    if profile.ndim != 2 or profile.shape[1] != m:
        raise InvalidInputError(f"profile must be (n, {m}), got {profile.shape}")
    if not np.all(np.isfinite(profile)):
        raise InvalidInputError("profile contains non-finite entries")
    return profile


def encode(profile, params: ModelParams) -> np.ndarray:
    """Per-agent embeddings for one profile; permutation-equivariant in rows."""
    profile = _check_profile(profile, params.hyper.num_bundles)
    p = _as_param_tensors(params, None)
    return _encode_core(constant(profile[None, :, :]), p, params.hyper).data[0]


def allocation_head(embeddings, profile, index: BundleIndex, params: ModelParams) -> np.ndarray:
    """Feasible allocation matrix for one profile's embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    p = _as_param_tensors(params, None)
    return _allocation_core(constant(emb[None, :, :]), p, params.hyper, index).data[0]


def payment_head(embeddings, allocation, profile, params: ModelParams) -> np.ndarray:
    """Payments for one profile given embeddings and a (feasible) allocation."""
    emb = np.asarray(embeddings, dtype=np.float64)
    profile = _check_profile(profile, params.hyper.num_bundles)
    p = _as_param_tensors(params, None)
    _, pay = _payment_core(
        constant(emb[None, :, :]),
        constant(np.asarray(allocation, dtype=np.float64)[None, :, :]),
        constant(profile[None, :, :]),
        p,
    )
    return pay.data[0]


def forward(profile, params: ModelParams, index: BundleIndex) -> MechanismOutcome:
    """Full mechanism on one reported profile."""
    profile = _check_profile(profile, params.hyper.num_bundles)
    p = _as_param_tensors(params, None)
    x, pay, _, _ = _forward_core(constant(profile[None, :, :]), p, params.hyper, index)
    return MechanismOutcome.from_parts(x.data[0], pay.data[0], profile)


def forward_batch(profiles, params: ModelParams, index: BundleIndex) -> tuple[np.ndarray, np.ndarray]:
    """(allocations, payments) for a (B, n, M) batch, untracked."""
    profiles = np.asarray(profiles, dtype=np.float64)
    p = _as_param_tensors(params, None)
    x, pay, _, _ = _forward_core(constant(profiles), p, params.hyper, index)
    return x.data, pay.data


def _expand_with_rows(profiles: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Stack n copies of the batch, copy i having agent i's row replaced."""
    b, n, m = profiles.shape
    out = np.repeat(profiles[None, :, :, :], n, axis=0)  # (n, B, n, M)
    for i in range(n):
        out[i, :, i, :] = rows[:, i, :]
    return out.reshape(n * b, n, m)


def _block_utilities_tracked(
    x: Tensor, pay: Tensor, true_profiles: np.ndarray
) -> Tensor:
    """(B, n) utilities where block i of an expanded batch scores agent i.

    Values are taken under the agents' true valuations, payments under the
    (possibly misreported) forward pass.
    """
    b, n, _ = true_profiles.shape
    parts = []
    for i in range(n):
        xb = ad.slice_axis(x, 0, i * b, (i + 1) * b)
        xi = ad.take_axis(xb, 1, [i])  # (B, 1, M)
        val = ad.tensor_sum(ad.mul(xi, constant(true_profiles[:, i : i + 1, :])), axis=2)
        pb = ad.slice_axis(pay, 0, i * b, (i + 1) * b)
        pi = ad.take_axis(pb, 1, [i])  # (B, 1)
        parts.append(ad.sub(val, pi))
    return ad.concat(parts, axis=1)


def _ascend_misreports(
    params: ModelParams,
    profiles: np.ndarray,
    config: TrainConfig,
    index: BundleIndex,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Projected gradient ascent on each agent's report, all agents at once.

    Restart 0 starts from the truthful report; further restarts start uniform
    in [0,1]^M. Every iterate is scored, so the best found report is never
    worse than truthful. Mechanism parameters receive no gradient here.

    Returns (best_misreports (B,n,M), best_utilities (B,n), truthful utilities).
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    b, n, m = profiles.shape
    hyper = params.hyper
    best_v = profiles.copy()
    best_u = np.full((b, n), -np.inf)
    u_truth = np.zeros((b, n))

    for restart in range(config.restarts):
        if restart == 0:
            cur = profiles.copy()
        else:
            cur = rng.uniform(0.0, 1.0, size=(b, n, m))
        for step in range(config.misreport_steps + 1):
            tape = Tape()
            p = _as_param_tensors(params, None)  # params stay constant
            leaves = [tape.leaf(cur[:, i, :]) for i in range(n)]
            blocks = []
            for i in range(n):
                base = profiles.copy()
                base[:, i, :] = 0.0
                placed = ad.scatter_axis(ad.reshape(leaves[i], (b, 1, m)), 1, [i], n, fill=0.0)
                blocks.append(ad.add(placed, constant(base)))
            expanded = ad.concat(blocks, axis=0)
            x, pay, _, _ = _forward_core(expanded, p, hyper, index)
            u = _block_utilities_tracked(x, pay, profiles)
            u_now = u.data
            if restart == 0 and step == 0:
                u_truth = u_now.copy()
            # strict improvement only: on a flat landscape the truthful
            # start (evaluated first) wins, not float-rounding noise
            better = u_now > best_u + 1e-12
            if better.any():
                best_u = np.where(better, u_now, best_u)
                best_v[better] = cur[better]
            if step == config.misreport_steps:
                break
            objective = ad.tensor_sum(u)
            wanted = {leaf.node_id for leaf in leaves}
            grads = ad.backward(tape, objective, wanted=wanted)
            for i, leaf in enumerate(leaves):
                g = grads.get(leaf.node_id)
                if g is not None:
                    cur[:, i, :] = np.clip(cur[:, i, :] + config.misreport_lr * g, 0.0, 1.0)
    return best_v, best_u, u_truth


def misreport_ascent(
    params: ModelParams,
    profile,
    agent: int,
    config: TrainConfig,
    index: BundleIndex,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Best misreport found for one agent on one profile (others truthful)."""
    profile = _check_profile(profile, params.hyper.num_bundles)
    if not (0 <= agent < profile.shape[0]):
        raise InvalidInputError(f"agent index {agent} out of range")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    best_v, _, _ = _ascend_misreports(params, profile[None, :, :], config, index, rng)
    return best_v[0, agent].copy()


def regret_estimate(
    params: ModelParams,
    batch,
    config: TrainConfig,
    index: BundleIndex,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Per-agent, per-sample regrets: max(0, best misreport utility - truthful)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None, :, :]
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(config.seed))
    _, best_u, u_truth = _ascend_misreports(params, batch, config, index, rng)
    return np.maximum(0.0, best_u - u_truth)


def combined_loss(revenue_mean: Tensor, regret_term: Tensor, gamma: float) -> Tensor:
    """-(1-gamma) * log(1 + mean revenue) + gamma * mean per-sample regret sum.

    Monotone decreasing in revenue and defined for all revenue >= 0.
    """
    if not (0.0 <= gamma <= 1.0):
        raise InvalidInputError("gamma must lie in [0, 1]")
    rev = float(np.asarray(revenue_mean.data))
    if rev < -1e-12:
        raise InternalInvariantError(f"revenue must be non-negative, got {rev}")
    return ad.add(
        ad.scale(ad.log1p(revenue_mean), -(1.0 - gamma)),
        ad.scale(regret_term, gamma),
    )


def train(
    dataset_samples,
    config: TrainConfig,
    index: BundleIndex,
    arch: Optional[ArchConfig] = None,
    on_metrics: Optional[Callable[[MetricsRecord], None]] = None,
) -> tuple[ModelParams, list[MetricsRecord]]:
    """Train the mechanism on a stack of normalized profiles (S, n, M).

    Per iteration: sample a batch, run misreport ascent on the regret
    sub-batch, assemble the combined loss, and take one adaptive-moment step
    on the parameters only. Fixed seed gives an identical metrics stream.
    Raises DivergenceError (after emitting a diagnostic record) if the loss
    goes non-finite.
    """
    samples = np.asarray(dataset_samples, dtype=np.float64)
    if samples.ndim != 3:
        raise InvalidInputError(f"dataset must be (S, n, M), got {samples.shape}")
    s_total, n, m = samples.shape
    if arch is None:
        arch = ArchConfig(num_bundles=m)
    if arch.num_bundles != m:
        raise InvalidInputError("architecture num_bundles does not match the dataset")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    params = ModelParams.initialize(arch, seed=config.seed)
    names = params.names()
    adam_m = {k: np.zeros_like(params.tensors[k]) for k in names}
    adam_v = {k: np.zeros_like(params.tensors[k]) for k in names}
    records: list[MetricsRecord] = []

    br = config.batch_size if config.regret_batch is None else min(config.regret_batch, config.batch_size)

    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, s_total, size=config.batch_size)
        batch = samples[idx]
        reg_batch = batch[:br]

        mis, _, _ = _ascend_misreports(params, reg_batch, config, index, rng)

        tape = Tape()
        p = _as_param_tensors(params, tape)
        x, pay, _, _ = _forward_core(constant(batch), p, arch, index)
        revenue = ad.tensor_sum(pay, axis=1)  # (B,)
        revenue_mean = ad.mean(revenue)

        expected_true = ad.tensor_sum(ad.mul(x, constant(batch)), axis=2)
        u_truth = ad.slice_axis(ad.sub(expected_true, pay), 0, 0, br)

        expanded = _expand_with_rows(reg_batch, mis.reshape(br, n, m))
        xm, paym, _, _ = _forward_core(constant(expanded), p, arch, index)
        u_mis = _block_utilities_tracked(xm, paym, reg_batch)
        gains = ad.relu(ad.sub(u_mis, u_truth))  # (Br, n)
        regret_term = ad.mean(ad.tensor_sum(gains, axis=1))

        loss = combined_loss(revenue_mean, regret_term, config.gamma)
        loss_val = float(loss.data)
        rev_val = float(revenue_mean.data)
        regret_vals = gains.data

        record = MetricsRecord(
            iteration=it,
            revenue_mean=rev_val,
            regret_mean=float(regret_vals.mean()),
            regret_max=float(regret_vals.max()),
            loss=loss_val,
            wallclock_ms=int(round((time.perf_counter() - t0) * 1000)),
        )
        if not np.isfinite(loss_val):
            records.append(record)
            if on_metrics is not None:
                on_metrics(record)
            raise DivergenceError(f"non-finite loss at iteration {it}: {loss_val}")

        wanted = {p[k].node_id for k in names}
        grads = ad.backward(tape, loss, wanted=wanted)
        tcorr1 = 1.0 - config.beta1**it
        tcorr2 = 1.0 - config.beta2**it
        for k in names:
            g = grads.get(p[k].node_id)
            if g is None:
                continue
            adam_m[k] = config.beta1 * adam_m[k] + (1.0 - config.beta1) * g
            adam_v[k] = config.beta2 * adam_v[k] + (1.0 - config.beta2) * g * g
            step_dir = (adam_m[k] / tcorr1) / (np.sqrt(adam_v[k] / tcorr2) + 1e-8)
            params.tensors[k] = params.tensors[k] - config.step_size * step_dir

        record.wallclock_ms = int(round((time.perf_counter() - t0) * 1000))
        records.append(record)
        if on_metrics is not None:
            on_metrics(record)

    return params, records


def save_checkpoint(params: ModelParams, path, meta: Optional[dict] = None) -> None:
    """Versioned JSON checkpoint; float64 payloads hex-encoded, so the
    save/load round trip is bitwise exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "hyper": asdict(params.hyper),
        "tensors": [
            {
                "name": k,
                "shape": list(params.tensors[k].shape),
                "data_base16": params.tensors[k].astype("<f8", copy=False).tobytes().hex(),
            }
            for k in params.names()
        ],
    }
    if meta is not None:
        doc["meta"] = meta
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise CheckpointError(f"checkpoint {path} is missing a version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {doc['version']!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        hyper = ArchConfig(**doc["hyper"])
        tensors = {}
        for entry in doc["tensors"]:
            shape = tuple(entry["shape"])
            raw = bytes.fromhex(entry["data_base16"])
            arr = np.frombuffer(raw, dtype="<f8")
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(
                    f"tensor {entry['name']} has {arr.size} values, expected shape {shape}"
                )
            tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt: {exc}") from exc
    return ModelParams(hyper, tensors)
