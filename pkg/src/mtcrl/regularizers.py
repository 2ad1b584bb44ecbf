"""Loss terms beyond per-task risk: module decorrelation, routing-graph
sparsity/balance, and the gradient-invariance penalties over environments.

All terms are built from tape ops, so they stay differentiable; the
invariance penalties additionally run their inner gradient with
``create_graph=True`` so the training step can differentiate through them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import MtlModel, TapeBinding

VARIANCE_FLOOR = 1e-8
GIRM_VARIANTS = ("none", "norm", "var", "irm-baseline")


class RegularizerError(Exception):
    pass


class DegenerateVarianceError(RegularizerError):
    pass


class EmptyBatchError(RegularizerError):
    pass


@dataclass
class PenaltyWeights:
    lambda_decor: float = 20.0
    lambda_sps: float = 0.2
    lambda_bal: float = 5.0
    lambda_girm: float = 5.0
    girm_variant: str = "var"

    def __post_init__(self):
        for name in ("lambda_decor", "lambda_sps", "lambda_bal", "lambda_girm"):
            if getattr(self, name) < 0:
                raise RegularizerError(f"{name} must be nonnegative")
        if self.girm_variant not in GIRM_VARIANTS:
            raise RegularizerError(
                f"girm_variant must be one of {GIRM_VARIANTS}, "
                f"got '{self.girm_variant}'"
            )


def pearson_corr(zi: T.Tensor, zj: T.Tensor,
                 variance_floor: float = VARIANCE_FLOOR,
                 strict: bool = False) -> T.Tensor:
    """In-batch correlation matrix between all column pairs of zi and zj.

    Covariances are centered sums (no 1/B factor; it cancels in the ratio).
    Column variances get ``variance_floor`` added inside the square roots so
    constant columns yield 0 instead of dividing by zero; ``strict=True``
    raises on such columns instead.
    """
    if zi.shape[0] < 2 or zi.shape[0] != zj.shape[0]:
        raise RegularizerError(
            f"pearson_corr needs >= 2 shared rows, got {zi.shape} vs {zj.shape}"
        )
    zci = T.subtract(zi, T.mean(zi, axis=0, keepdims=True))
    zcj = T.subtract(zj, T.mean(zj, axis=0, keepdims=True))
    vi = T.sum_(T.square(zci), axis=0)
    vj = T.sum_(T.square(zcj), axis=0)
    if strict and (vi.data.min() < variance_floor or vj.data.min() < variance_floor):
        raise DegenerateVarianceError(
            "a column's variance is below the floor; correlation undefined"
        )
    cov = T.matmul(T.transpose(zci), zcj)
    inv_i = T.reshape(T.pow_const(T.add(vi, variance_floor), -0.5),
                      (zi.shape[1], 1))
    inv_j = T.reshape(T.pow_const(T.add(vj, variance_floor), -0.5),
                      (1, zj.shape[1]))
    return T.multiply(T.multiply(cov, inv_i), inv_j)


def decorrelation_loss(zs, lambda_decor: float,
                       variance_floor: float = VARIANCE_FLOOR) -> T.Tensor:
    """Squared Frobenius norms of pairwise module correlations, summed i<j."""
    if len(zs) < 2:
        return T.Tensor(0.0)
    total = None
    for i in range(len(zs)):
        for j in range(i + 1, len(zs)):
            term = T.l2_norm_sq(pearson_corr(zs[i], zs[j], variance_floor))
            total = term if total is None else T.add(total, term)
    return T.scale(total, lambda_decor)


def graph_reg_loss(a, lambda_sps: float, lambda_bal: float) -> T.Tensor:
    """L1 sparsity minus entropy balance over the routing matrix's module masses.

    The entropy argument is the per-module share of the total routing mass;
    zero-mass modules contribute 0 (0*log 0 := 0).  An all-zero matrix is
    degenerate: both terms are 0 and a warning is emitted.
    """
    if not isinstance(a, T.Tensor):
        a = T.Tensor(a)
    if a.data.min() < 0 or a.data.max() > 1:
        raise RegularizerError("routing weights must lie in [0, 1]")
    if np.all(a.data == 0):
        warnings.warn("all-zero routing matrix: graph loss degenerates to 0",
                      RuntimeWarning, stacklevel=2)
        return T.Tensor(0.0)
    l1 = T.sum_(T.absolute(a))
    col = T.sum_(a, axis=0)
    total = T.sum_(a)
    mass = T.multiply(col, T.pow_const(total, -1.0))
    zero_mask = (col.data == 0).astype(np.float64)
    safe = T.add(mass, T.Tensor(zero_mask))  # log(0+1)=0 where mass is 0
    entropy = T.scale(T.sum_(T.multiply(mass, T.log(safe))), -1.0)
    return T.subtract(T.scale(l1, lambda_sps), T.scale(entropy, lambda_bal))


def task_loss(pred: T.Tensor, labels: np.ndarray, kind: str) -> T.Tensor:
    """Mean per-sample loss: squared error or softmax cross-entropy."""
    if kind == "mse":
        y = T.Tensor(np.asarray(labels, dtype=np.float64).reshape(pred.shape))
        return T.mean(T.square(T.subtract(pred, y)))
    if kind == "xent":
        return T.mean(T.softmax_cross_entropy(pred, labels))
    raise RegularizerError(f"unknown loss kind '{kind}'")


def env_task_risk(model: MtlModel, binding: TapeBinding, batch, t: int,
                  zs=None, a_row=None, detach_heads: bool = False) -> T.Tensor:
    """Mean task loss of task ``t`` over one environment batch."""
    if t not in batch.labels:
        raise EmptyBatchError(f"batch '{batch.env_id}' has no labels for task {t}")
    if batch.inputs.shape[0] == 0:
        raise EmptyBatchError(f"batch '{batch.env_id}' is empty")
    pred = model.predict(binding, t, x=batch.inputs, zs=zs, a_row=a_row,
                         detach_heads=detach_heads)
    return task_loss(pred, batch.labels[t], model.loss_kinds[t])


@dataclass
class EnvGradientSet:
    """Per task, per environment: gradient of the env risk w.r.t. the task's
    routing row (a 1 x K tensor, on-tape when built with create_graph)."""

    grads: dict = field(default_factory=dict)  # task -> {env_id -> Tensor}
    env_order: tuple = ()

    def for_task(self, t: int) -> list[T.Tensor]:
        by_env = self.grads[t]
        return [by_env[e] for e in self.env_order]


def environment_gradients(model: MtlModel, binding: TapeBinding, env_batches,
                          create_graph: bool = True,
                          detach_heads: bool = True) -> EnvGradientSet:
    """Routing-row gradients of every (task, environment) risk.

    Heads are detached by default: the per-task predictors are treated as
    fixed inside the invariance penalties, so the penalties contribute
    exactly zero gradient to head parameters.
    """
    if not env_batches:
        raise RegularizerError("need at least one environment")
    grads = {t: {} for t in range(model.tasks)}
    for batch in env_batches:
        zs = model.encode(binding, batch.inputs)
        for t in range(model.tasks):
            row = model.routing_row(binding, t)
            risk = env_task_risk(model, binding, batch, t, zs=zs, a_row=row,
                                 detach_heads=detach_heads)
            grads[t][batch.env_id] = T.grad(
                risk, [row], create_graph=create_graph
            ).get(row)
    return EnvGradientSet(grads, tuple(b.env_id for b in env_batches))


def girm_norm_penalty(env_grads: EnvGradientSet) -> T.Tensor:
    """Sum over tasks and environments of squared routing-gradient norms."""
    total = None
    for t in env_grads.grads:
        for g in env_grads.for_task(t):
            term = T.l2_norm_sq(g)
            total = term if total is None else T.add(total, term)
    return total


def girm_var_penalty(env_grads: EnvGradientSet) -> T.Tensor:
    """Cross-environment variance of the routing gradients, summed over tasks."""
    total = None
    n_env = len(env_grads.env_order)
    for t in env_grads.grads:
        gs = env_grads.for_task(t)
        avg = gs[0]
        for g in gs[1:]:
            avg = T.add(avg, g)
        avg = T.scale(avg, 1.0 / n_env)
        for g in gs:
            term = T.scale(T.l2_norm_sq(T.subtract(g, avg)), 1.0 / n_env)
            total = term if total is None else T.add(total, term)
    return total


def irm_baseline_penalty(model: MtlModel, binding: TapeBinding, env_batches,
                         create_graph: bool = True) -> T.Tensor:
    """Squared norms of env-risk gradients w.r.t. routing row AND head
    parameters.  This is the multi-task IRM adaptation: unlike the
    graph-invariance penalties, heads are not detached."""
    if not env_batches:
        raise RegularizerError("need at least one environment")
    total = None
    for batch in env_batches:
        zs = model.encode(binding, batch.inputs)
        for t in range(model.tasks):
            row = model.routing_row(binding, t)
            risk = env_task_risk(model, binding, batch, t, zs=zs, a_row=row)
            head_leaves = binding.leaves_for(model.heads[t].parameters())
            gm = T.grad(risk, [row, *head_leaves], create_graph=create_graph)
            for target in (row, *head_leaves):
                term = T.l2_norm_sq(gm.get(target))
                total = term if total is None else T.add(total, term)
    return total


def girm_penalty(model: MtlModel, binding: TapeBinding, env_batches,
                 variant: str, create_graph: bool = True,
                 detach_heads: bool = True) -> T.Tensor | None:
    """Dispatch on the invariance-penalty variant; None when disabled.

    ``detach_heads=False`` is a test hook for demonstrating the detachment
    contract; the baseline variant never detaches by definition.
    """
    if variant == "none":
        return None
    if variant == "irm-baseline":
        return irm_baseline_penalty(model, binding, env_batches, create_graph)
    env_grads = environment_gradients(model, binding, env_batches,
                                      create_graph=create_graph,
                                      detach_heads=detach_heads)
    if variant == "norm":
        return girm_norm_penalty(env_grads)
    if variant == "var":
        return girm_var_penalty(env_grads)
    raise RegularizerError(f"unknown girm variant '{variant}'")


def total_regularized_loss(model: MtlModel, binding: TapeBinding, train_batch,
                           env_batches, weights: PenaltyWeights):
    """Task risks + decorrelation + graph regularization (+ invariance
    penalty), accumulated in training order.

    Task risks come from the training batch only; the environment batches
    feed the invariance penalty.  Returns (total tensor, parts dict).
    """
    assert train_batch.env_id == "train", \
        "task risks must be computed on the training environment only"
    zs = model.encode(binding, train_batch.inputs)
    a = model.routing.weights(binding)
    parts = {}
    total = None
    risks = []
    for t in range(model.tasks):
        risk = env_task_risk(model, binding, train_batch, t, zs=zs,
                             a_row=T.narrow(a, 0, t, 1))
        risks.append(float(risk.data))
        total = risk if total is None else T.add(total, risk)
    parts["task_risks"] = risks
    if weights.lambda_decor > 0:
        decor = decorrelation_loss(zs, weights.lambda_decor)
        parts["decor"] = float(decor.data)
        total = T.add(total, decor)
    if weights.lambda_sps > 0 or weights.lambda_bal > 0:
        graph = graph_reg_loss(a, weights.lambda_sps, weights.lambda_bal)
        parts["graph"] = float(graph.data)
        total = T.add(total, graph)
    if weights.girm_variant != "none" and weights.lambda_girm > 0:
        penalty = girm_penalty(model, binding, env_batches,
                               weights.girm_variant)
        parts["girm"] = float(penalty.data)
        total = T.add(total, T.scale(penalty, weights.lambda_girm))
    return total, parts
