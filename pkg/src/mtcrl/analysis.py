"""Diagnostics over trained models: input-gradient saliency, the spurious
score, module-correlation heatmaps, task-to-module gradient tables, and the
routing-induced task similarity graph, plus CSV/SVG export helpers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import MtlModel, TapeBinding
from .regularizers import env_task_risk, pearson_corr


class AnalysisError(Exception):
    pass


class UndefinedScoreError(AnalysisError):
    pass


def factor_gradient(model: MtlModel, t: int, batch,
                    use_probability: bool = False) -> np.ndarray:
    """Summed absolute input-gradients of the true-class score over a batch.

    For classification the differentiated scalar is the pre-softmax score
    of the true class (``use_probability=True`` switches to the softmax
    probability); for scalar outputs it is the output itself.
    """
    tape = T.Tape()
    binding = TapeBinding(tape)
    x = tape.leaf(batch.inputs)
    zs = model.encode(binding, x)
    out = model.predict(binding, t, zs=zs)
    if model.loss_kinds[t] == "xent":
        labels = np.asarray(batch.labels[t]).astype(np.int64)
        onehot = np.zeros(out.shape)
        onehot[np.arange(out.shape[0]), labels] = 1.0
        if use_probability:
            nll = T.softmax_cross_entropy(out, labels)
            prob = T.exp(T.scale(nll, -1.0))
            score = T.sum_(prob)
        else:
            score = T.sum_(T.multiply(out, T.Tensor(onehot)))
    else:
        score = T.sum_(out)
    g = T.grad(score, [x]).get(x).data
    return np.abs(g).sum(axis=0)


def spurious_score(grad_per_dim: np.ndarray, causal_mask: np.ndarray) -> float:
    """Fraction of saliency mass on non-causal input dimensions."""
    grad_per_dim = np.asarray(grad_per_dim, dtype=np.float64)
    mask = np.asarray(causal_mask, dtype=bool)
    if grad_per_dim.shape != mask.shape:
        raise AnalysisError(
            f"saliency shape {grad_per_dim.shape} != mask shape {mask.shape}"
        )
    total = float(grad_per_dim.sum())
    if total <= 0.0:
        raise UndefinedScoreError("total gradient mass is zero")
    return float(grad_per_dim[~mask].sum() / total)


def model_spurious_scores(model: MtlModel, batch) -> dict:
    """Per-task spurious scores of a model on one batch."""
    return {
        t: spurious_score(factor_gradient(model, t, batch),
                          batch.causal_masks[t])
        for t in range(model.tasks)
    }


@dataclass
class CorrHeatmap:
    matrix: np.ndarray          # d x d correlations over concatenated outputs
    block_boundaries: tuple     # column indices where module blocks start

    def max_cross_block(self) -> float:
        """Largest |correlation| between dimensions of different modules."""
        bounds = list(self.block_boundaries) + [self.matrix.shape[0]]
        block_of = np.empty(self.matrix.shape[0], dtype=int)
        for b, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            block_of[lo:hi] = b
        cross = block_of[:, None] != block_of[None, :]
        return float(np.abs(self.matrix[cross]).max()) if cross.any() else 0.0


def module_corr_heatmap(model: MtlModel, batch) -> CorrHeatmap:
    """Full correlation matrix over all module output dimensions."""
    if batch.n_samples < 2:
        raise AnalysisError("need at least two samples for correlations")
    tape = T.Tape()
    binding = TapeBinding(tape)
    zs = model.encode(binding, batch.inputs)
    zcat = T.concatenate(zs, axis=1)
    rho = pearson_corr(zcat, zcat)
    dim = model.bank.module_dim
    return CorrHeatmap(rho.data.copy(),
                       tuple(i * dim for i in range(model.k)))


@dataclass
class TaskModuleGradients:
    per_env: dict               # env_id -> T x K array
    diff: np.ndarray            # generalization table, see below
    diff_envs: tuple            # (subtrahend, minuend) env ids

    def table(self, env_id: str) -> np.ndarray:
        return self.per_env[env_id]


def task_module_gradients(model: MtlModel, env_batches) -> TaskModuleGradients:
    """Routing-gradient tables per environment plus a (valid - train) table.

    Entry (t, i) is the gradient of environment risk for task t w.r.t. the
    routing weight of module i; the difference table flags modules that
    help on the training slice but not off it.  Signs are reported raw.
    """
    if len(env_batches) < 2:
        raise AnalysisError("need at least two environments")
    per_env = {}
    for batch in env_batches:
        tape = T.Tape()
        binding = TapeBinding(tape)
        zs = model.encode(binding, batch.inputs)
        table = np.zeros((model.tasks, model.k))
        for t in range(model.tasks):
            row = model.routing_row(binding, t)
            risk = env_task_risk(model, binding, batch, t, zs=zs, a_row=row)
            table[t] = T.grad(risk, [row]).get(row).data.ravel()
        per_env[batch.env_id] = table
    ids = [b.env_id for b in env_batches]
    if "train" in per_env and "valid" in per_env:
        pair = ("train", "valid")
    else:
        pair = (ids[0], ids[-1])
    diff = per_env[pair[1]] - per_env[pair[0]]
    return TaskModuleGradients(per_env, diff, pair)


@dataclass
class SimilarityGraph:
    matrix: np.ndarray          # T x T cosine similarities of routing rows
    edges: np.ndarray           # bool adjacency after thresholding
    threshold: float


def task_similarity(a_matrix, threshold: float = 0.1) -> SimilarityGraph:
    """Cosine similarity between routing rows; zero rows relate to nothing."""
    a = np.asarray(a_matrix, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = a / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    np.clip(sim, -1.0, 1.0, out=sim)
    return SimilarityGraph(sim, sim >= threshold, threshold)


# ---------------------------------------------------------------------------
# exports


def write_matrix_csv(path, matrix, row_labels=None, col_labels=None):
    matrix = np.atleast_2d(np.asarray(matrix))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if col_labels is not None:
            writer.writerow(([""] if row_labels is not None else [])
                            + list(col_labels))
        for i, row in enumerate(matrix):
            prefix = [row_labels[i]] if row_labels is not None else []
            writer.writerow(prefix + [repr(float(v)) for v in row])


def svg_heatmap(path, matrix, boundaries=(), cell: int = 8):
    """Grayscale grid heatmap with optional module-block separator lines."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    n, m = matrix.shape
    vmax = float(np.abs(matrix).max()) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'width="{m * cell}" height="{n * cell}">'
    ]
    for i in range(n):
        for j in range(m):
            level = int(round(255 * (1.0 - abs(matrix[i, j]) / vmax)))
            parts.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({level},{level},{level})"/>'
            )
    for b in boundaries:
        if b == 0:
            continue
        parts.append(
            f'<line x1="{b * cell}" y1="0" x2="{b * cell}" '
            f'y2="{n * cell}" stroke="red" stroke-width="1"/>'
        )
        parts.append(
            f'<line x1="0" y1="{b * cell}" x2="{m * cell}" '
            f'y2="{b * cell}" stroke="red" stroke-width="1"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
