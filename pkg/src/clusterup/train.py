"""Toy residual model, synthetic clustered data, and SGD training.

The model is a stack of residual FFN blocks (some replaced by MoE layers
after upcycling) with a linear classification head. Gradients are computed by
hand-rolled reverse mode through the whole stack, using the straight-through
convention for routing: top-k selections and capacity drops are constants
under differentiation, while the gates stay differentiable through the
softmax. ``grad_check`` verifies everything against central finite
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distill import EmaTeacher, ema_update, make_teacher, teacher_forward
from .errors import AllMasked, NonFiniteLoss, SeparationInfeasible, ShapeMismatch
from .linalg import Array, as_matrix
from .moe import (
    DenseFfn,
    MoeForwardCache,
    MoeLayer,
    RoutingRecord,
    ffn_backward,
    ffn_forward_cached,
    load_balance_loss,
    moe_backward,
    moe_forward_cached,
)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class ToyModel:
    """Residual FFN stack with a linear head; blocks may be MoE layers."""

    input_dim: int
    blocks: list
    head: Array  # (n_classes, input_dim)

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.float64)
        for b, block in enumerate(self.blocks):
            if block.d != self.input_dim:
                raise ShapeMismatch(
                    f"block {b} operates on dim {block.d}, model dim is {self.input_dim}"
                )
        if self.head.shape[1] != self.input_dim:
            raise ShapeMismatch(f"head shape {self.head.shape} != (*, {self.input_dim})")

    @property
    def n_classes(self) -> int:
        return self.head.shape[0]

    @property
    def moe_sites(self) -> list[int]:
        return [b for b, blk in enumerate(self.blocks) if isinstance(blk, MoeLayer)]

    def copy(self) -> "ToyModel":
        return ToyModel(
            input_dim=self.input_dim,
            blocks=[blk.copy() for blk in self.blocks],
            head=self.head.copy(),
        )


def make_dense_model(d: int, h: int, n_blocks: int, n_classes: int, seed: int) -> ToyModel:
    """Fresh dense model with 1/sqrt(fan_in) gaussian weights and zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(n_blocks):
        blocks.append(DenseFfn(
            w1=rng.standard_normal((h, d)) / math.sqrt(d),
            b1=np.zeros(h),
            w2=rng.standard_normal((d, h)) / math.sqrt(h),
            b2=np.zeros(d),
        ))
    head = rng.standard_normal((n_classes, d)) / math.sqrt(d)
    return ToyModel(input_dim=d, blocks=blocks, head=head)


def named_params(model: ToyModel):
    """Deterministic (name, array) walk over every trainable tensor."""
    yield "head", model.head
    for b, block in enumerate(model.blocks):
        prefix = f"block{b}."
        if isinstance(block, MoeLayer):
            yield prefix + "router", block.router
            for i, e in enumerate(block.experts):
                ep = f"{prefix}expert{i}."
                yield ep + "w1", e.w1
                yield ep + "b1", e.b1
                yield ep + "w2", e.w2
                yield ep + "b2", e.b2
        else:
            yield prefix + "w1", block.w1
            yield prefix + "b1", block.b1
            yield prefix + "w2", block.w2
            yield prefix + "b2", block.b2


# ---------------------------------------------------------------------------
# teacher over all MoE sites
# ---------------------------------------------------------------------------

@dataclass
class ModelTeacher:
    """One EMA teacher per MoE site of a model."""

    sites: dict[int, EmaTeacher]
    beta: float


def make_model_teacher(model: ToyModel, beta: float) -> ModelTeacher:
    return ModelTeacher(
        sites={b: make_teacher(model.blocks[b], beta) for b in model.moe_sites},
        beta=beta,
    )


def update_model_teacher(teacher: ModelTeacher, model: ToyModel) -> ModelTeacher:
    for b, site_teacher in teacher.sites.items():
        ema_update(site_teacher, model.blocks[b])
    return teacher


def named_teacher_params(teacher: ModelTeacher):
    for b in sorted(teacher.sites):
        mirror = teacher.sites[b].mirror
        prefix = f"teacher.block{b}."
        yield prefix + "router", mirror.router
        for i, e in enumerate(mirror.experts):
            ep = f"{prefix}expert{i}."
            yield ep + "w1", e.w1
            yield ep + "b1", e.b1
            yield ep + "w2", e.w2
            yield ep + "b2", e.b2


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDataset:
    """Clustered points on the sphere with class = cluster mod n_classes."""

    inputs: Array          # (d, n)
    labels: np.ndarray     # (n,)
    cluster_ids: np.ndarray
    directions: Array      # (n_clusters, d), unit rows
    n_clusters: int
    separation: float
    seed: int

    @property
    def n(self) -> int:
        return self.inputs.shape[1]

    def slice(self, start: int, stop: int) -> "SyntheticDataset":
        """Contiguous sub-sample sharing the same generating distribution."""
        return SyntheticDataset(
            inputs=self.inputs[:, start:stop],
            labels=self.labels[start:stop],
            cluster_ids=self.cluster_ids[start:stop],
            directions=self.directions,
            n_clusters=self.n_clusters,
            separation=self.separation,
            seed=self.seed,
        )


def _sample_directions(
    d: int, k: int, threshold: float, rng: np.random.Generator, budget: int
) -> Array:
    chosen: list[np.ndarray] = []
    attempts = 0
    while len(chosen) < k and attempts < budget:
        attempts += 1
        v = rng.standard_normal(d)
        norm = float(np.linalg.norm(v))
        if norm < 1e-12:
            continue
        v /= norm
        if all(float(np.dot(v, c)) < threshold for c in chosen):
            chosen.append(v)
    if len(chosen) == k:
        return np.vstack(chosen)
    if k <= d:
        # Orthonormal fallback: pairwise cosines are ~1e-16, under any
        # positive threshold, so extreme separations stay feasible.
        g = rng.standard_normal((d, k))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))[None, :]
        cross = q.T @ q - np.eye(k)
        if float(np.abs(cross).max()) < threshold:
            return q.T.copy()
    raise SeparationInfeasible(
        f"could not draw {k} directions with pairwise cosine < {threshold:g} in {d}-D"
    )


def make_synthetic_dataset(
    d: int,
    n_classes: int,
    n_clusters: int,
    n: int,
    separation: float,
    seed: int,
    retry_budget: int = 5000,
) -> SyntheticDataset:
    """Points = cluster direction + gaussian noise / separation.

    Cluster directions are unit vectors with pairwise cosine below
    1/separation; each point's class is its cluster index mod n_classes.
    """
    if not n_clusters >= n_classes >= 2:
        raise ValueError(f"need n_clusters >= n_classes >= 2, got {n_clusters}, {n_classes}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if separation <= 0:
        raise ValueError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    directions = _sample_directions(d, n_clusters, 1.0 / separation, rng, retry_budget)
    cluster_ids = rng.integers(0, n_clusters, size=n)
    noise = rng.standard_normal((d, n)) / separation
    inputs = directions[cluster_ids].T + noise
    return SyntheticDataset(
        inputs=inputs,
        labels=(cluster_ids % n_classes).astype(np.int64),
        cluster_ids=cluster_ids.astype(np.int64),
        directions=directions,
        n_clusters=n_clusters,
        separation=float(separation),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    task: float
    lb: float
    eesd: float
    lambda_lb: float
    lambda_eesd: float
    total: float

    @classmethod
    def build(cls, task, lb, eesd, lambda_lb, lambda_eesd) -> "LossReport":
        return cls(
            task=task, lb=lb, eesd=eesd,
            lambda_lb=lambda_lb, lambda_eesd=lambda_eesd,
            total=task + lambda_lb * lb + lambda_eesd * eesd,
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task, "lb": self.lb, "eesd": self.eesd,
            "lambda_lb": self.lambda_lb, "lambda_eesd": self.lambda_eesd,
            "total": self.total,
        }


@dataclass
class ForwardState:
    block_inputs: list[Array]
    ffn_caches: dict
    moe_caches: dict[int, MoeForwardCache]
    records: dict[int, RoutingRecord]
    site_outputs: dict[int, Array]
    final: Array
    logits: Array


def model_forward(model: ToyModel, x, capacity_factor: float | None = None) -> ForwardState:
    """Forward pass keeping every intermediate needed for backward."""
    xm = as_matrix(x, "x")
    if xm.shape[0] != model.input_dim:
        raise ShapeMismatch(f"x has {xm.shape[0]} rows, model expects {model.input_dim}")
    block_inputs, ffn_caches, moe_caches = [], {}, {}
    records, site_outputs = {}, {}
    cur = xm
    for b, block in enumerate(model.blocks):
        block_inputs.append(cur)
        if isinstance(block, MoeLayer):
            y, record, cache = moe_forward_cached(block, cur, capacity_factor)
            moe_caches[b] = cache
            records[b] = record
            site_outputs[b] = y
        else:
            y, cache = ffn_forward_cached(block, cur)
            ffn_caches[b] = cache
        cur = cur + y
    return ForwardState(
        block_inputs=block_inputs, ffn_caches=ffn_caches, moe_caches=moe_caches,
        records=records, site_outputs=site_outputs,
        final=cur, logits=model.head @ cur,
    )


def _cross_entropy(logits: Array, labels: np.ndarray) -> tuple[float, Array]:
    """Mean cross-entropy and its gradient wrt the logits."""
    n_tokens = logits.shape[1]
    labels = np.asarray(labels).reshape(-1)
    if labels.size != n_tokens:
        raise ShapeMismatch(f"{labels.size} labels for {n_tokens} tokens")
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=0))
    token_idx = np.arange(n_tokens)
    loss = float(np.mean(log_z - shifted[labels, token_idx]))
    probs = np.exp(shifted - log_z[None, :])
    dlogits = probs
    dlogits[labels, token_idx] -= 1.0
    dlogits /= n_tokens
    return loss, dlogits


def _teacher_outputs(
    teacher: ModelTeacher | None, state: ForwardState, sites: list[int]
) -> dict[int, Array] | None:
    if teacher is None:
        return None
    return {b: teacher_forward(teacher.sites[b], state.block_inputs[b]) for b in sites}


def _eesd_terms(
    state: ForwardState, teacher_ys: dict[int, Array], sites: list[int], mask
) -> tuple[float, dict[int, Array], int]:
    t_tokens = state.final.shape[1]
    if mask is None:
        valid = np.ones(t_tokens, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool).reshape(-1)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllMasked("every token is masked")
    per_site_diff = {}
    total = 0.0
    for b in sites:
        diff = (state.site_outputs[b] - teacher_ys[b]) * valid[None, :]
        per_site_diff[b] = diff
        total += float(np.sum(diff * diff) / n_valid)
    return total / len(sites), per_site_diff, n_valid


def total_loss(
    model: ToyModel,
    teacher: ModelTeacher | None,
    inputs,
    labels,
    *,
    lambda_lb: float = 0.0,
    lambda_eesd: float = 0.0,
    mask=None,
    capacity_factor: float | None = None,
    frozen_teacher: dict[int, Array] | None = None,
    state_out: dict | None = None,
) -> tuple[LossReport, dict[str, Array]]:
    """Combined objective and its gradients for every trainable tensor.

    The task term is mean cross-entropy at the head; the load-balancing term
    sums over MoE sites; the distillation term averages over MoE sites and is
    active only when a teacher is supplied. Teacher predictions are constants
    under differentiation (``frozen_teacher`` substitutes precomputed ones,
    which is how the finite-difference checker pins them).
    """
    xm = as_matrix(inputs, "inputs")
    state = model_forward(model, xm, capacity_factor)
    sites = model.moe_sites
    t_tokens = xm.shape[1]

    task, dlogits = _cross_entropy(state.logits, labels)
    lb = float(sum(load_balance_loss(state.records[b]) for b in sites))

    eesd = 0.0
    eesd_diff: dict[int, Array] = {}
    n_valid = t_tokens
    teacher_ys = frozen_teacher
    if teacher_ys is None:
        teacher_ys = _teacher_outputs(teacher, state, sites)
    if teacher_ys is not None and sites:
        eesd, eesd_diff, n_valid = _eesd_terms(state, teacher_ys, sites, mask)

    report = LossReport.build(task, lb, eesd, lambda_lb, lambda_eesd)

    grads: dict[str, Array] = {"head": dlogits @ state.final.T}
    dx = model.head.T @ dlogits
    for b in reversed(range(len(model.blocks))):
        block = model.blocks[b]
        prefix = f"block{b}."
        if isinstance(block, MoeLayer):
            dy = dx
            if b in eesd_diff and lambda_eesd != 0.0:
                dy = dx + (2.0 * lambda_eesd / (len(sites) * n_valid)) * eesd_diff[b]
            dprobs_extra = None
            if lambda_lb != 0.0:
                fraction = state.records[b].per_expert_fraction
                dprobs_extra = lambda_lb * fraction / t_tokens
            dxi, block_grads = moe_backward(block, state.moe_caches[b], dy, dprobs_extra)
        else:
            dxi, block_grads = ffn_backward(block, state.ffn_caches[b], dx)
        for key, val in block_grads.items():
            grads[prefix + key] = val
        dx = dx + dxi

    if state_out is not None:
        state_out["state"] = state
    return report, grads


def _loss_value(
    model: ToyModel,
    inputs: Array,
    labels,
    *,
    lambda_lb: float,
    lambda_eesd: float,
    frozen_teacher: dict[int, Array] | None,
    mask,
    capacity_factor: float | None,
) -> tuple[float, list]:
    """Loss value plus the discrete routing decisions, without gradients."""
    state = model_forward(model, inputs, capacity_factor)
    sites = model.moe_sites
    task, _ = _cross_entropy(state.logits, labels)
    lb = float(sum(load_balance_loss(state.records[b]) for b in sites))
    eesd = 0.0
    if frozen_teacher is not None and sites:
        eesd, _, _ = _eesd_terms(state, frozen_teacher, sites, mask)
    total = task + lambda_lb * lb + lambda_eesd * eesd
    decisions = [
        (state.records[b].topk_indices, state.records[b].dropped) for b in sites
    ]
    return total, decisions


def _same_decisions(a: list, b: list) -> bool:
    return all(
        np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
        for x, y in zip(a, b)
    )


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------

def train_step(
    model: ToyModel,
    teacher: ModelTeacher | None,
    inputs,
    labels,
    lr: float,
    *,
    lambda_lb: float = 0.0,
    lambda_eesd: float = 0.0,
    mask=None,
    capacity_factor: float | None = None,
    state_out: dict | None = None,
) -> tuple[ToyModel, ModelTeacher | None, LossReport]:
    """One plain gradient-descent step followed by the teacher EMA update."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    report, grads = total_loss(
        model, teacher, inputs, labels,
        lambda_lb=lambda_lb, lambda_eesd=lambda_eesd, mask=mask,
        capacity_factor=capacity_factor, state_out=state_out,
    )
    if not math.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss at report {report}", report=report)
    for name, arr in named_params(model):
        arr -= lr * grads[name]
    if teacher is not None:
        update_model_teacher(teacher, model)
    return model, teacher, report


def _mean_routing_entropy(records: dict[int, RoutingRecord]) -> float:
    if not records:
        return 0.0
    values = []
    for record in records.values():
        p = record.probs
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        values.append(float(-terms.sum(axis=1).mean()))
    return float(np.mean(values))


def run_training(
    model: ToyModel,
    teacher: ModelTeacher | None,
    dataset: SyntheticDataset,
    *,
    steps: int,
    batch_size: int,
    lr: float,
    lambda_lb: float = 0.0,
    lambda_eesd: float = 0.0,
    capacity_factor: float | None = None,
    seed: int = 0,
    log_fn=None,
) -> list[LossReport]:
    """SGD over randomly drawn batches; one log record per step via log_fn."""
    rng = np.random.default_rng(seed)
    n = dataset.n
    batch = min(batch_size, n)
    reports = []
    for step in range(steps):
        idx = rng.choice(n, size=batch, replace=False)
        state_out: dict = {}
        model, teacher, report = train_step(
            model, teacher, dataset.inputs[:, idx], dataset.labels[idx], lr,
            lambda_lb=lambda_lb, lambda_eesd=lambda_eesd,
            capacity_factor=capacity_factor, state_out=state_out,
        )
        reports.append(report)
        if log_fn is not None:
            state: ForwardState = state_out["state"]
            record = {"step": step}
            record.update(report.to_dict())
            record["routing_entropy"] = _mean_routing_entropy(state.records)
            record["drop_rate"] = {
                str(b): float(r.dropped.mean()) for b, r in state.records.items()
            }
            log_fn(record)
    return reports


def evaluate(
    model: ToyModel, inputs, labels, capacity_factor: float | None = None
) -> tuple[LossReport, ForwardState, float]:
    """Task/lb losses, forward state, and accuracy on a fixed batch."""
    state = model_forward(model, inputs, capacity_factor)
    task, _ = _cross_entropy(state.logits, labels)
    lb = float(sum(load_balance_loss(state.records[b]) for b in model.moe_sites))
    report = LossReport.build(task, lb, 0.0, 0.0, 0.0)
    pred = state.logits.argmax(axis=0)
    accuracy = float(np.mean(pred == np.asarray(labels).reshape(-1)))
    return report, state, accuracy


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(
    model: ToyModel,
    teacher: ModelTeacher | None,
    inputs,
    labels,
    epsilon: float = 1e-5,
    *,
    lambda_lb: float = 0.0,
    lambda_eesd: float = 0.0,
    mask=None,
    capacity_factor: float | None = None,
    samples_per_tensor: int = 50,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients against central finite differences.

    Samples parameters per tensor and skips any whose perturbation flips a
    top-k selection or capacity decision at either evaluation point, since the
    objective is only piecewise smooth there. Teacher predictions are frozen
    at their base values for every evaluation, matching the stop-gradient
    semantics of the distillation term, so teacher-parameter quotients are
    exactly zero. Returns a dict with max_rel_error, per_tensor errors,
    checked/skipped counts, and teacher_max_quotient.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    xm = as_matrix(inputs, "inputs")
    state = model_forward(model, xm, capacity_factor)
    frozen = _teacher_outputs(teacher, state, model.moe_sites)

    _, grads = total_loss(
        model, teacher, xm, labels,
        lambda_lb=lambda_lb, lambda_eesd=lambda_eesd, mask=mask,
        capacity_factor=capacity_factor, frozen_teacher=frozen,
    )
    kwargs = dict(
        lambda_lb=lambda_lb, lambda_eesd=lambda_eesd,
        frozen_teacher=frozen, mask=mask, capacity_factor=capacity_factor,
    )
    _, base_decisions = _loss_value(model, xm, labels, **kwargs)

    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    max_rel = 0.0
    checked = skipped = 0
    for name, arr in named_params(model):
        count = min(samples_per_tensor, arr.size)
        indices = rng.choice(arr.size, size=count, replace=False)
        tensor_err = 0.0
        for flat_idx in indices:
            orig = arr.flat[flat_idx]
            arr.flat[flat_idx] = orig + epsilon
            loss_plus, dec_plus = _loss_value(model, xm, labels, **kwargs)
            arr.flat[flat_idx] = orig - epsilon
            loss_minus, dec_minus = _loss_value(model, xm, labels, **kwargs)
            arr.flat[flat_idx] = orig
            if not (_same_decisions(dec_plus, base_decisions)
                    and _same_decisions(dec_minus, base_decisions)):
                skipped += 1
                continue
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = float(grads[name].flat[flat_idx])
            rel = abs(analytic - numeric) / max(1.0, abs(numeric))
            tensor_err = max(tensor_err, rel)
            checked += 1
        per_tensor[name] = tensor_err
        max_rel = max(max_rel, tensor_err)

    teacher_max_quotient = None
    if teacher is not None:
        teacher_max_quotient = 0.0
        for _, arr in named_teacher_params(teacher):
            count = min(samples_per_tensor, arr.size)
            indices = rng.choice(arr.size, size=count, replace=False)
            for flat_idx in indices:
                orig = arr.flat[flat_idx]
                arr.flat[flat_idx] = orig + epsilon
                loss_plus, _ = _loss_value(model, xm, labels, **kwargs)
                arr.flat[flat_idx] = orig - epsilon
                loss_minus, _ = _loss_value(model, xm, labels, **kwargs)
                arr.flat[flat_idx] = orig
                quotient = abs(loss_plus - loss_minus) / (2.0 * epsilon)
                teacher_max_quotient = max(teacher_max_quotient, quotient)

    return {
        "max_rel_error": max_rel,
        "per_tensor": per_tensor,
        "checked": checked,
        "skipped": skipped,
        "teacher_max_quotient": teacher_max_quotient,
    }
