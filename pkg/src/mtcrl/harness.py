"""Training loop, optimizers, experiment drivers, and configuration.

One training step follows the two-phase schedule: accumulate task risks,
decorrelation, and graph regularization; backprop that through everything;
then rebuild the environment risks with detached heads, backprop the
invariance penalty, and add its gradients before the optimizer update.
Heads therefore receive exactly zero gradient from the penalty.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .analysis import factor_gradient, spurious_score, task_similarity
from .data import (EnvironmentBatch, MnistPairSpec, SemSpec, compose_multimnist,
                   gen_multisem, split_environments)
from .model import MtlModel, TapeBinding
from .regularizers import (PenaltyWeights, decorrelation_loss, env_task_risk,
                           girm_penalty, graph_reg_loss)

MODES = ("stl", "mtl-vanilla", "mtcrl")
PLATEAU_TOL = 1e-6


class HarnessError(Exception):
    pass


@dataclass
class TrainConfig:
    dataset: SemSpec | MnistPairSpec = field(default_factory=SemSpec)
    mode: str = "mtcrl"
    k_modules: int = 8
    total_module_dim: int = 32
    encoder_hidden: tuple = (32,)
    encoder_activation: str = "tanh"
    head_hidden: tuple = ()
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epochs: int = 200
    batch_size: int = 0          # 0 = full batch
    patience: int = 10
    seed: int = 0
    stl_module_dim: int = 0      # 0 = total_module_dim // tasks
    rho_spur_split: str = "valid"

    def __post_init__(self):
        if self.mode not in MODES:
            raise HarnessError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.optimizer not in ("sgd", "adam"):
            raise HarnessError(f"unknown optimizer '{self.optimizer}'")
        if self.epochs < 0 or self.patience < 0:
            raise HarnessError("epochs and patience must be nonnegative")


# ---------------------------------------------------------------------------
# config (de)serialization


def config_to_dict(cfg: TrainConfig) -> dict:
    if isinstance(cfg.dataset, SemSpec):
        ds = {"kind": "multisem", **cfg.dataset.__dict__}
    else:
        ds = {"kind": "multimnist", **cfg.dataset.__dict__}
        ds["ratios"] = list(ds["ratios"])
    return {
        "dataset": ds,
        "mode": cfg.mode,
        "k_modules": cfg.k_modules,
        "total_module_dim": cfg.total_module_dim,
        "encoder_hidden": list(cfg.encoder_hidden),
        "encoder_activation": cfg.encoder_activation,
        "head_hidden": list(cfg.head_hidden),
        "weights": dict(cfg.weights.__dict__),
        "optimizer": cfg.optimizer,
        "learning_rate": cfg.learning_rate,
        "betas": list(cfg.betas),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "patience": cfg.patience,
        "seed": cfg.seed,
        "stl_module_dim": cfg.stl_module_dim,
        "rho_spur_split": cfg.rho_spur_split,
    }


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    ds = dict(d.pop("dataset", {"kind": "multisem"}))
    kind = ds.pop("kind", "multisem")
    if kind == "multisem":
        dataset = SemSpec(**ds)
    elif kind == "multimnist":
        if "ratios" in ds:
            ds["ratios"] = tuple(ds["ratios"])
        dataset = MnistPairSpec(**ds)
    else:
        raise HarnessError(f"unknown dataset kind '{kind}'")
    if "weights" in d:
        d["weights"] = PenaltyWeights(**d["weights"])
    for key in ("encoder_hidden", "head_hidden", "betas"):
        if key in d:
            d[key] = tuple(d[key])
    known = set(TrainConfig.__dataclass_fields__)
    unknown = set(d) - known
    if unknown:
        raise HarnessError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(dataset=dataset, **d)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# optimizers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, pairs):
        for p, g in pairs:
            p.value = p.value - self.lr * g


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.state = {}

    def step(self, pairs):
        self.t += 1
        for p, g in pairs:
            m, v = self.state.get(id(p), (np.zeros_like(p.value),
                                           np.zeros_like(p.value)))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.state[id(p)] = (m, v)
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.betas)


# ---------------------------------------------------------------------------
# one training step


def step_gradients(model: MtlModel, train_batch, env_batches,
                   weights: PenaltyWeights, tape: T.Tape | None = None,
                   detach_heads: bool = True):
    """Per-parameter gradients for one step, plus loss-part metrics.

    ``detach_heads=False`` exists only so tests can demonstrate that the
    detachment contract matters; training always detaches.
    """
    assert train_batch.env_id == "train", \
        "task risks must come from the training environment only"
    tape = tape or T.Tape()
    tape.reset()
    binding = TapeBinding(tape)
    zs = model.encode(binding, train_batch.inputs)
    a = model.routing.weights(binding)
    parts = {}
    loss = None
    risks = []
    for t in range(model.tasks):
        risk = env_task_risk(model, binding, train_batch, t, zs=zs,
                             a_row=T.narrow(a, 0, t, 1))
        risks.append(float(risk.data))
        loss = risk if loss is None else T.add(loss, risk)
    parts["task_risks"] = risks
    if weights.lambda_decor > 0:
        decor = decorrelation_loss(zs, weights.lambda_decor)
        parts["decor"] = float(decor.data)
        loss = T.add(loss, decor)
    if weights.lambda_sps > 0 or weights.lambda_bal > 0:
        graph = graph_reg_loss(a, weights.lambda_sps, weights.lambda_bal)
        parts["graph"] = float(graph.data)
        loss = T.add(loss, graph)
    if not np.isfinite(loss.data):
        raise HarnessError("non-finite training loss")

    params = model.parameters()
    leaves = binding.leaves_for(params)
    main = T.grad(loss, leaves)
    grads = {p.name: main.get(leaf).data.copy()
             for p, leaf in zip(params, leaves)}

    if weights.girm_variant != "none" and weights.lambda_girm > 0:
        penalty = girm_penalty(model, binding, env_batches,
                               weights.girm_variant,
                               detach_heads=detach_heads)
        parts["girm"] = float(penalty.data)
        pen = T.grad(penalty, leaves)
        for p, leaf in zip(params, leaves):
            grads[p.name] += weights.lambda_girm * pen.get(leaf).data
    parts["loss"] = float(loss.data)
    return grads, parts


def train_step(model: MtlModel, train_batch, env_batches,
               weights: PenaltyWeights, opt, tape: T.Tape | None = None):
    """One optimizer update following the two-phase gradient schedule."""
    grads, parts = step_gradients(model, train_batch, env_batches, weights,
                                  tape=tape)
    opt.step([(p, grads[p.name]) for p in model.parameters()])
    return parts


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: MtlModel, batch) -> dict:
    """Risks and accuracies per task; no nodes are recorded."""
    tape = T.Tape()
    tape.recording = False
    binding = TapeBinding(tape)
    zs = model.encode(binding, batch.inputs)
    risks, accs = [], []
    for t in range(model.tasks):
        pred = model.predict(binding, t, zs=zs)
        kind = model.loss_kinds[t]
        y = batch.labels[t]
        if kind == "mse":
            err = pred.data.ravel() - np.asarray(y, dtype=np.float64)
            risks.append(float(np.mean(err ** 2)))
            accs.append(float(np.mean(np.where(pred.data.ravel() >= 0, 1.0, -1.0)
                                      == np.asarray(y))))
        else:
            logp = pred.data - pred.data.max(axis=1, keepdims=True)
            logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
            labels = np.asarray(y).astype(np.int64)
            risks.append(float(-logp[np.arange(labels.size), labels].mean()))
            accs.append(float(np.mean(pred.data.argmax(axis=1) == labels)))
    return {"risks": risks, "accuracy": accs}


# ---------------------------------------------------------------------------
# full runs


@dataclass
class RunReport:
    config: dict
    config_hash: str
    seed: int
    mode: str
    epochs_run: list
    train_risk_curve: list      # per epoch, per task
    valid_risk_curve: list
    acc_train: list
    acc_val: list
    risk_test: list
    acc_test: list
    rho_spur: list
    saliency: list              # per task, per input dim
    routing: list               # A snapshot (rows = tasks)
    similarity: list
    wall_clock_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def json(self, include_wall_clock: bool = True) -> str:
        payload = self.to_dict()
        if not include_wall_clock:
            payload.pop("wall_clock_s")
        return json.dumps(payload, sort_keys=True, indent=1)


def _dataset_bundle(cfg: TrainConfig):
    if isinstance(cfg.dataset, SemSpec):
        train_b, valid_b, test_b = gen_multisem(cfg.dataset)
        tasks = cfg.dataset.tasks
        kinds = ["mse"] * tasks
        head_out = [1] * tasks
    else:
        train_b, valid_b, test_b = compose_multimnist(cfg.dataset)
        tasks = 2
        kinds = ["xent"] * tasks
        head_out = [cfg.dataset.num_classes] * tasks
    return train_b, valid_b, test_b, tasks, kinds, head_out


def _build_model(cfg: TrainConfig, input_dim, tasks, kinds, head_out,
                 seed_key, k=None, total_dim=None) -> MtlModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_key]))
    return MtlModel(
        tasks=tasks,
        k=k if k is not None else cfg.k_modules,
        input_dim=input_dim,
        total_dim=total_dim if total_dim is not None else cfg.total_module_dim,
        encoder_hidden=cfg.encoder_hidden,
        encoder_activation=cfg.encoder_activation,
        head_hidden=cfg.head_hidden,
        head_out_dims=head_out,
        loss_kinds=kinds,
        rng=rng,
    )


def effective_weights(cfg: TrainConfig) -> PenaltyWeights:
    """Regularizers apply only in mtcrl mode; other modes run bare risk."""
    if cfg.mode == "mtcrl":
        return cfg.weights
    return PenaltyWeights(0.0, 0.0, 0.0, 0.0, "none")


def _fit(model, train_batch, env_batches, weights, cfg, stream_key):
    opt = make_optimizer(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stream_key]))
    tape = T.Tape()
    train_curve, valid_curve = [], []
    best = np.inf
    bad = 0
    epochs_run = 0
    valid_batch = next(b for b in env_batches if b.env_id == "valid")
    for _ in range(cfg.epochs):
        if cfg.batch_size and cfg.batch_size < train_batch.n_samples:
            order = rng.permutation(train_batch.n_samples)
            for lo in range(0, order.size, cfg.batch_size):
                idx = order[lo: lo + cfg.batch_size]
                mini = EnvironmentBatch(
                    "train", train_batch.inputs[idx],
                    {t: train_batch.labels[t][idx] for t in train_batch.labels},
                    train_batch.causal_masks)
                train_step(model, mini, env_batches, weights, opt, tape=tape)
        else:
            train_step(model, train_batch, env_batches, weights, opt, tape=tape)
        epochs_run += 1
        train_eval = evaluate(model, train_batch)
        valid_eval = evaluate(model, valid_batch)
        train_curve.append(train_eval["risks"])
        valid_curve.append(valid_eval["risks"])
        total = float(sum(train_eval["risks"]))
        if total < best - PLATEAU_TOL:
            best = total
            bad = 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    return train_curve, valid_curve, epochs_run


def train(cfg: TrainConfig, return_model: bool = False):
    """Run one experiment to completion; deterministic given (config, seed)."""
    t0 = time.perf_counter()
    train_b, valid_b, test_b, tasks, kinds, head_out = _dataset_bundle(cfg)
    envs = split_environments(train_b, valid_b)
    weights = effective_weights(cfg)
    rho_batch = {"train": envs[0], "valid": envs[1], "test": test_b}[
        cfg.rho_spur_split]

    if cfg.mode == "stl":
        share = cfg.stl_module_dim or max(cfg.total_module_dim // tasks, 1)
        models = []
        curves_tr, curves_va, epochs_run = [], [], []
        acc_train, acc_val, acc_test, risk_test = [], [], [], []
        rho, saliency, routing_rows = [], [], []
        for t in range(tasks):
            sub_envs = [e.task_view(t) for e in envs]
            m = _build_model(cfg, train_b.input_dim, 1, [kinds[t]],
                             [head_out[t]], seed_key=100 + t, k=1,
                             total_dim=share)
            tr, va, ep = _fit(m, sub_envs[0], sub_envs, weights, cfg,
                              stream_key=200 + t)
            models.append(m)
            curves_tr.append(tr)
            curves_va.append(va)
            epochs_run.append(ep)
            acc_train.append(evaluate(m, sub_envs[0])["accuracy"][0])
            acc_val.append(evaluate(m, sub_envs[1])["accuracy"][0])
            test_eval = evaluate(m, test_b.task_view(t))
            acc_test.append(test_eval["accuracy"][0])
            risk_test.append(test_eval["risks"][0])
            sal = factor_gradient(m, 0, rho_batch.task_view(t))
            saliency.append(sal.tolist())
            rho.append(spurious_score(sal, rho_batch.causal_masks[t]))
            routing_rows.append(m.routing.matrix()[0].tolist())
        a_matrix = np.array(routing_rows)
        report = RunReport(
            config=config_to_dict(cfg), config_hash=config_hash(cfg),
            seed=cfg.seed, mode=cfg.mode, epochs_run=epochs_run,
            train_risk_curve=[[row[0] for row in curve] for curve in curves_tr],
            valid_risk_curve=[[row[0] for row in curve] for curve in curves_va],
            acc_train=acc_train, acc_val=acc_val,
            risk_test=risk_test, acc_test=acc_test,
            rho_spur=rho, saliency=saliency,
            routing=a_matrix.tolist(),
            similarity=task_similarity(a_matrix).matrix.tolist(),
            wall_clock_s=time.perf_counter() - t0,
        )
        bundle = {"kind": "stl", "models": models}
    else:
        model = _build_model(cfg, train_b.input_dim, tasks, kinds, head_out,
                             seed_key=100)
        tr, va, ep = _fit(model, envs[0], envs, weights, cfg, stream_key=200)
        train_eval = evaluate(model, envs[0])
        valid_eval = evaluate(model, envs[1])
        test_eval = evaluate(model, test_b)
        saliency = [factor_gradient(model, t, rho_batch).tolist()
                    for t in range(tasks)]
        rho = [spurious_score(np.array(saliency[t]),
                              rho_batch.causal_masks[t])
               for t in range(tasks)]
        a_matrix = model.routing.matrix()
        report = RunReport(
            config=config_to_dict(cfg), config_hash=config_hash(cfg),
            seed=cfg.seed, mode=cfg.mode, epochs_run=[ep],
            train_risk_curve=[[row[t] for row in tr] for t in range(tasks)],
            valid_risk_curve=[[row[t] for row in va] for t in range(tasks)],
            acc_train=train_eval["accuracy"], acc_val=valid_eval["accuracy"],
            risk_test=test_eval["risks"], acc_test=test_eval["accuracy"],
            rho_spur=rho, saliency=saliency,
            routing=a_matrix.tolist(),
            similarity=task_similarity(a_matrix).matrix.tolist(),
            wall_clock_s=time.perf_counter() - t0,
        )
        bundle = {"kind": "mtl", "model": model}
    if return_model:
        return report, bundle
    return report


# ---------------------------------------------------------------------------
# experiment drivers


def _train_dict(cfg_dict: dict) -> dict:
    return train(config_from_dict(cfg_dict)).to_dict()


def run_configs(configs) -> list[dict]:
    """Train each config; fans out over MTCRL_WORKERS processes if set."""
    dicts = [config_to_dict(c) for c in configs]
    workers = int(os.environ.get("MTCRL_WORKERS", "1"))
    if workers > 1 and len(dicts) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_dict, dicts))
    return [_train_dict(d) for d in dicts]


def run_table2(base: TrainConfig, datasets) -> dict:
    """STL-vs-vanilla-MTL comparison rows for each dataset.

    ``datasets`` is a list of (name, spec) pairs; both modes share the
    dataset spec (and therefore its generation seed).
    """
    configs, keys = [], []
    for name, spec in datasets:
        for mode in ("stl", "mtl-vanilla"):
            configs.append(replace(base, dataset=spec, mode=mode))
            keys.append((mode, name))
    reports = run_configs(configs)
    rows = []
    for (mode, name), rep in zip(keys, reports):
        rows.append({
            "method": mode,
            "dataset": name,
            "acc_train": float(np.mean(rep["acc_train"])),
            "acc_val": float(np.mean(rep["acc_val"])),
            "rho_spur": float(np.mean(rep["rho_spur"])),
        })
    return {"rows": rows, "reports": reports}


def _ranks(values):
    """Average ranks, so ties contribute no spurious ordering signal."""
    arr = np.asarray(values, dtype=np.float64)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size)
    ranks[order] = np.arange(arr.size, dtype=np.float64)
    for v in np.unique(arr):
        tied = arr == v
        if tied.sum() > 1:
            ranks[tied] = ranks[tied].mean()
    return ranks


def spearman(xs, ys) -> float:
    rx, ry = _ranks(list(xs)), _ranks(list(ys))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


def run_task_sweep(task_counts, base: TrainConfig) -> dict:
    """MTL vs STL across task counts, with monotone-trend verdicts."""
    if not isinstance(base.dataset, SemSpec):
        raise HarnessError("the task sweep is defined for the SEM testbed")
    if any(t < 2 for t in task_counts):
        raise HarnessError("task counts must be >= 2")
    configs, keys = [], []
    for n_tasks in task_counts:
        spec = replace(base.dataset, tasks=int(n_tasks))
        for mode in ("mtl-vanilla", "stl"):
            configs.append(replace(base, dataset=spec, mode=mode))
            keys.append((mode, int(n_tasks)))
    reports = run_configs(configs)
    rows = {}
    for (mode, n_tasks), rep in zip(keys, reports):
        row = rows.setdefault(n_tasks, {"tasks": n_tasks})
        prefix = "mtl" if mode == "mtl-vanilla" else "stl"
        row[f"{prefix}_acc_val"] = float(np.mean(rep["acc_val"]))
        row[f"{prefix}_rho_spur"] = float(np.mean(rep["rho_spur"]))
    ordered = [rows[t] for t in sorted(rows)]
    ts = [r["tasks"] for r in ordered]
    mtl_rho = [r["mtl_rho_spur"] for r in ordered]
    mtl_acc = [r["mtl_acc_val"] for r in ordered]
    verdicts = {
        "mtl_rho_spur_rising": spearman(ts, mtl_rho) > 0,
        "mtl_acc_val_falling": spearman(ts, mtl_acc) < 0,
        "stl_rho_below_mtl_everywhere": all(
            r["stl_rho_spur"] < r["mtl_rho_spur"] for r in ordered),
    }
    return {
        "rows": ordered,
        "verdicts": verdicts,
        "spearman": {"mtl_rho_spur": spearman(ts, mtl_rho),
                     "mtl_acc_val": spearman(ts, mtl_acc)},
    }


ABLATION_VARIANTS = {
    "full": {},
    "no-decor": {"lambda_decor": 0.0},
    "no-sps": {"lambda_sps": 0.0},
    "no-bal": {"lambda_bal": 0.0},
    "no-graph-reg": {"lambda_sps": 0.0, "lambda_bal": 0.0},
    "no-girm": {"girm_variant": "none"},
}


def run_ablation(base: TrainConfig, seeds=(0, 1, 2, 3, 4),
                 variants=None) -> dict:
    """Toggle regularizer weights; mean +/- std of accuracy over seeds."""
    if base.mode != "mtcrl":
        base = replace(base, mode="mtcrl")
    names = list(variants) if variants else list(ABLATION_VARIANTS)
    configs, keys = [], []
    for name in names:
        overrides = ABLATION_VARIANTS[name]
        weights = PenaltyWeights(**{**base.weights.__dict__, **overrides})
        for seed in seeds:
            configs.append(replace(base, weights=weights, seed=int(seed)))
            keys.append((name, int(seed)))
    reports = run_configs(configs)
    per_variant = {name: {} for name in names}
    for (name, seed), rep in zip(keys, reports):
        per_variant[name][seed] = float(np.mean(rep["acc_val"]))
    rows = []
    for name in names:
        accs = [per_variant[name][s] for s in seeds]
        rows.append({
            "variant": name,
            "acc_val_mean": float(np.mean(accs)),
            "acc_val_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            "per_seed": accs,
        })
    by_name = {r["variant"]: r for r in rows}
    orderings = {}
    for other in ("no-decor", "no-graph-reg"):
        if "full" in by_name and other in by_name:
            wins = sum(
                by_name["full"]["per_seed"][i] > by_name[other]["per_seed"][i]
                for i in range(len(seeds)))
            orderings[f"full_beats_{other}"] = {
                "mean": by_name["full"]["acc_val_mean"]
                        > by_name[other]["acc_val_mean"],
                "per_seed_wins": int(wins),
                "majority": wins * 2 > len(seeds),
            }
    return {"rows": rows, "orderings": orderings}
