"""Training loops for every mode, evaluation and checkpoints.

Per step in the split modes: loss -> joint backward -> tower gradients
(g1p, g1pp, g2) -> route -> tower updates with routed additions -> ordinary
updates for every other parameter -> updater refresh of the task-1 blend.
MMoE descends on the plain gradient; PCGrad-MMoE projects the per-task
gradients of the shared parameters before summing them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset, batch_iter
from .errors import NumericError
from .metrics import EvalReport, RunRecord, Telemetry, auc
from .model import Batch, FeatureSchema, Model, ModelConfig, build_model, compute_loss, loss_grad
from .nn import OptimizerState, ParamGrads, optimizer_step, seeded_rng
from .router import (
    GradientTriple,
    apply_routed_update,
    cosine,
    flatten,
    pcgrad_project,
    route,
    UpdaterState,
    updater_step,
)

log = logging.getLogger(__name__)


@dataclass
class TrainState:
    model: Model
    optimizer: OptimizerState
    updater: UpdaterState
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: seeded_rng(0, "pcgrad"))


def init_state(config: ModelConfig, schema: FeatureSchema) -> TrainState:
    model = build_model(config, schema)
    opt = OptimizerState(kind=config.optimizer, learning_rate=config.learning_rate)
    return TrainState(model, opt, UpdaterState(decay=config.rho), rng=seeded_rng(config.seed, "pcgrad"))


def _tower_flat(model: Model, grads: dict, name: str) -> np.ndarray:
    return flatten(ParamGrads.from_named(model.towers[name], grads))


def _norm(v: np.ndarray) -> float:
    return float(np.linalg.norm(v))


def train_step(state: TrainState, batch: Batch) -> RunRecord:
    """One optimisation step; returns its telemetry row."""
    model, cfg = state.model, state.model.config
    cache = model.forward(batch)
    labels = np.asarray(batch.labels, dtype=np.float64)
    total, per_task = compute_loss(cache.logits, labels, cfg.alpha)
    if not np.isfinite(total):
        raise NumericError(f"loss became non-finite at step {state.step}")
    d_logits = loss_grad(cache.logits, labels, cfg.alpha)
    rec = RunRecord(state.step, float(per_task[0]), float(per_task[1]), total)
    params = model.parameters()

    if cfg.split:
        grads = model.backward(cache, d_logits)
        triple = GradientTriple(
            _tower_flat(model, grads, "T1p"), _tower_flat(model, grads, "T1pp"), _tower_flat(model, grads, "T2"), state.step
        )
        out = route(triple, cfg.gamma)
        apply_routed_update(model.towers, triple, out if cfg.use_router else None, state.optimizer)
        tower_names = set(model.tower_param_names())
        optimizer_step(params, {k: g for k, g in grads.items() if k not in tower_names}, state.optimizer)
        if cfg.use_updater:
            model.mu = updater_step(state.updater, triple, out)
        rec.xi_a, rec.xi_b = out.xi_a, out.xi_b
        rec.lambda_a, rec.lambda_b = out.lambda_a, out.lambda_b
        rec.norm_g1p, rec.norm_g1pp, rec.norm_g2 = _norm(triple.g1p), _norm(triple.g1pp), _norm(triple.g2)
        rec.mu_p, rec.mu_pp = cache.mu
        if cfg.use_router:
            rec.norm_gR1p, rec.norm_gR1pp = _norm(out.gR1p), _norm(out.gR1pp)
    else:
        if cfg.use_pcgrad:
            g1 = model.backward(cache, d_logits * np.array([1.0, 0.0]))
            g2 = model.backward(cache, d_logits * np.array([0.0, 1.0]))
            shared = model.shared_param_names()
            flat = [np.concatenate([g[k].ravel() for k in shared]) for g in (g1, g2)]
            merged = np.sum(pcgrad_project(flat, state.rng), axis=0)
            grads = {k: g1[k] + g2[k] for k in g1}
            pos = 0
            for k in shared:
                n = grads[k].size
                grads[k] = merged[pos : pos + n].reshape(grads[k].shape)
                pos += n
        else:
            grads = model.backward(cache, d_logits)
        optimizer_step(params, grads, state.optimizer)
        gt1, gt2 = _tower_flat(model, grads, "T1"), _tower_flat(model, grads, "T2")
        rec.xi_b = cosine(gt1, gt2)
        rec.norm_g1p, rec.norm_g2 = _norm(gt1), _norm(gt2)

    model.touch()
    state.step += 1
    return rec


def predict(model: Model, dataset: LabeledDataset, batch_size: int = 8192) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), batch_size):
        out.append(model.predict_logits(dataset.batch(slice(start, start + batch_size))))
    return np.concatenate(out, axis=0)


def evaluate(model: Model, dataset: LabeledDataset, seed: int = 0, epoch: int = 0, step: int = 0) -> EvalReport:
    logits = predict(model, dataset)
    _, per_task = compute_loss(logits, dataset.labels.astype(np.float64), (1.0, 1.0))
    aucs = (auc(logits[:, 0], dataset.labels[:, 0]), auc(logits[:, 1], dataset.labels[:, 1]))
    return EvalReport(
        mode=model.config.mode,
        seed=seed,
        dataset=f"{dataset.tag}/{dataset.split}",
        split=dataset.split,
        epoch=epoch,
        step=step,
        auc=aucs,
        loss=(float(per_task[0]), float(per_task[1])),
    )


@dataclass
class RunResult:
    state: TrainState
    telemetry: Telemetry
    reports: list[EvalReport]


def run_training(
    config: ModelConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    epochs: int = 5,
    batch_size: int = 256,
    eval_every: int = 1,
    telemetry_stride: int = 1,
    max_steps: int | None = None,
) -> RunResult:
    """Train one seed end to end, evaluating on ``test`` every ``eval_every`` epochs."""
    state = init_state(config, train.schema())
    telemetry = Telemetry(telemetry_stride)
    reports: list[EvalReport] = []
    for epoch in range(1, epochs + 1):
        for batch in batch_iter(train, batch_size, config.seed, epoch):
            try:
                rec = train_step(state, batch)
            except NumericError as e:
                err = NumericError(f"step {state.step}: {e}")
                err.step = state.step
                err.last_record = telemetry.records[-1] if telemetry.records else None
                raise err from e
            telemetry.record_step(rec)
            if max_steps is not None and state.step >= max_steps:
                break
        done = max_steps is not None and state.step >= max_steps
        if epoch % eval_every == 0 or epoch == epochs or done:
            rep = evaluate(state.model, test, config.seed, epoch, state.step)
            log.info("%s seed=%d epoch=%d auc=%.4f/%.4f", config.mode, config.seed, epoch, *rep.auc)
            reports.append(rep)
        if done:
            break
    return RunResult(state, telemetry, reports)


# -- checkpoints ------------------------------------------------------------


def checkpoint_dict(state: TrainState) -> dict:
    m = state.model
    u = state.updater
    return {
        "config": m.config.to_dict(),
        "schema": m.schema.to_dict(),
        "params": {k: {"shape": list(p.shape), "data": p.ravel().tolist()} for k, p in m.parameters().items()},
        "mu": list(m.mu),
        "updater": {"sigma_p": u.sigma_p, "sigma_pp": u.sigma_pp, "mu_p": u.mu_p, "mu_pp": u.mu_pp, "decay": u.decay},
        "step": state.step,
    }


def save_checkpoint(state: TrainState, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    Path(path).write_text(json.dumps(checkpoint_dict(state)) + "\n")


def load_checkpoint(path) -> TrainState:
    doc = json.loads(Path(path).read_text())
    config = ModelConfig.from_dict(doc["config"])
    schema = FeatureSchema(**doc["schema"])
    state = init_state(config, schema)
    params = state.model.parameters()
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name][...] = arr
    state.model.mu = tuple(doc["mu"])
    state.updater = UpdaterState(**doc["updater"])
    state.step = int(doc["step"])
    state.model.touch()
    return state
