"""Optimizers, gradient clipping, the teacher-forced training loop with
observed switches and early stopping on development NLL, and evaluation.

Determinism contract: (seed, config, dataset) produce bitwise-identical
curves within one build. Batches are assembled in a fixed order and all
randomness flows from numpy Generators seeded by the config.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import numcore as nc
from .pointer_head import ModelConfig, build_model


class NumericalError(RuntimeError):
    """Loss or gradients left the finite range; training aborts."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"  # "adam" | "adadelta"
    learning_rate: float = 8e-4
    batch_size: int = 250
    max_grad_norm: float = 1.0
    inverse_temperature: float = 2.0
    switch_bias_init: float = -1.0
    early_stop_patience: int = 10
    eval_every: int = 500
    seed: int = 0
    max_updates: int = 50_000

    def __post_init__(self):
        if self.optimizer not in ("adam", "adadelta"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate and max_grad_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.inverse_temperature <= 0:
            raise ValueError("inverse_temperature must be positive")

    @staticmethod
    def seq2seq_defaults(**overrides):
        base = {"batch_size": 32, "inverse_temperature": 1.0, "max_updates": 20_000}
        base.update(overrides)
        return TrainConfig(**base)

    @staticmethod
    def from_file(path, **overrides):
        """key=value lines, every field by exact name; later flags win."""
        values = {}
        casts = {f.name: f.type for f in fields(TrainConfig)}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key, raw = key.strip(), raw.strip()
                if key not in casts:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                if key == "optimizer":
                    values[key] = raw
                elif key in ("learning_rate", "max_grad_norm",
                             "inverse_temperature", "switch_bias_init"):
                    values[key] = float(raw)
                else:
                    values[key] = int(raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**values)

    def to_text(self):
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def clip_global_norm(store: nc.ParamStore, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm;
    returns the applied factor (1.0 when nothing was clipped)."""
    total = 0.0
    for name in store.names():
        g = store.grads[name]
        sq = float(np.dot(g.reshape(-1), g.reshape(-1)))
        if not np.isfinite(sq):
            raise NumericalError(f"non-finite gradient in slot {name!r}")
        total += sq
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in store.grads.values():
        g *= factor
    return factor


class Adam:
    """Bias-corrected first/second-moment update."""

    def __init__(self, store, lr, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.b1 ** self.t
        b2t = 1.0 - self.b2 ** self.t
        for name, p in self.store.values.items():
            g = self.store.grads[name]
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Adadelta:
    """Accumulated-gradient / accumulated-update rule; no learning rate."""

    def __init__(self, store, rho=0.95, eps=1e-6):
        self.store = store
        self.rho = rho
        self.eps = eps
        self.eg = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.ex = {k: np.zeros_like(v) for k, v in store.values.items()}

    def step(self):
        for name, p in self.store.values.items():
            g = self.store.grads[name]
            eg = self.eg[name]
            ex = self.ex[name]
            eg += (1.0 - self.rho) * (g * g - eg)
            delta = np.sqrt(ex + self.eps) / np.sqrt(eg + self.eps) * g
            ex += (1.0 - self.rho) * (delta * delta - ex)
            p -= delta


def make_optimizer(cfg: TrainConfig, store):
    if cfg.optimizer == "adam":
        return Adam(store, cfg.learning_rate)
    return Adadelta(store)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def examples_to_batch(examples):
    """Stack same-shape examples into integer arrays."""
    from .pointer_head import DEFERRED_PTR, NO_PTR

    src = np.asarray([ex.source for ex in examples], dtype=np.int64)
    tgt = np.asarray([ex.target for ex in examples], dtype=np.int64)
    z = np.asarray([[st.z for st in ex.steps] for ex in examples], dtype=np.int64)
    ptr = np.asarray(
        [
            [
                DEFERRED_PTR if st.deferred
                else (st.location if st.z == 0 else NO_PTR)
                for st in ex.steps
            ]
            for ex in examples
        ],
        dtype=np.int64,
    )
    return {"source": src, "target": tgt, "z": z, "ptr": ptr}


def bucket_examples(examples):
    buckets = {}
    for ex in examples:
        buckets.setdefault((len(ex.source), len(ex.target)), []).append(ex)
    return [buckets[k] for k in sorted(buckets)]


def eval_batches(examples, batch_size=256):
    for bucket in bucket_examples(examples):
        for i in range(0, len(bucket), batch_size):
            yield examples_to_batch(bucket[i : i + batch_size])


def file_batch_stream(examples, batch_size, seed):
    """Cycle a finite dataset in shuffled same-shape batches."""
    rng = np.random.default_rng(seed)
    buckets = bucket_examples(examples)
    while True:
        order = []
        for i, bucket in enumerate(buckets):
            perm = rng.permutation(len(bucket))
            for j in range(0, len(bucket), batch_size):
                order.append((i, perm[j : j + batch_size]))
        for i, idx in [order[k] for k in rng.permutation(len(order))]:
            yield examples_to_batch([buckets[i][j] for j in idx])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(model, examples, itemp=1.0):
    """Teacher-forced metrics: error rate / token accuracy (a pointed
    location counts as correct when the source token there equals the
    reference token), mean per-step NLL, pointer usage, and switch
    accuracy against observed z (pointer models)."""
    shortlist = model.cfg.shortlist_size
    n_steps = 0
    n_wrong = 0
    n_pointer_preds = 0
    n_switch_right = 0
    nll_total = 0.0
    for batch in eval_batches(examples):
        trace = model.batch_trace(batch, itemp)
        src, tgt, z = batch["source"], batch["target"], batch["z"]
        n_steps += tgt.size
        nll_total += float(trace.nll.sum())
        if model.cfg.pointer:
            is_loc = trace.pred_flat >= shortlist
            resolved = np.where(
                is_loc,
                np.take_along_axis(
                    src, np.maximum(trace.pred_flat - shortlist, 0), axis=1
                ),
                trace.pred_flat,
            )
            n_pointer_preds += int(is_loc.sum())
            n_switch_right += int(((trace.d > 0.5) == (z == 1)).sum())
        else:
            resolved = trace.pred_flat
        n_wrong += int((resolved != tgt).sum())
    metrics = {
        "examples": len(examples),
        "steps": n_steps,
        "error_rate": n_wrong / n_steps if n_steps else 0.0,
        "token_accuracy": 1.0 - n_wrong / n_steps if n_steps else 0.0,
        "mean_step_nll": nll_total / n_steps if n_steps else 0.0,
        "pointer_usage": n_pointer_preds / n_steps if n_steps else 0.0,
        "switch_accuracy": (
            n_switch_right / n_steps if model.cfg.pointer and n_steps else None
        ),
    }
    return metrics


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class CurvePoint:
    updates: int
    train_nll: float
    dev_nll: float
    dev_metric: float


@dataclass
class Curves:
    points: list[CurvePoint] = field(default_factory=list)

    def append(self, point):
        if self.points and point.updates <= self.points[-1].updates:
            raise ValueError("update counts must increase strictly")
        self.points.append(point)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["updates", "train_nll", "dev_nll", "dev_metric"])
        for p in self.points:
            writer.writerow(
                [p.updates, repr(p.train_nll), repr(p.dev_nll), repr(p.dev_metric)]
            )
        return buf.getvalue()

    def to_jsonl(self):
        return "".join(
            json.dumps(
                {
                    "updates": p.updates,
                    "train_nll": p.train_nll,
                    "dev_nll": p.dev_nll,
                    "dev_metric": p.dev_metric,
                },
                sort_keys=True,
            )
            + "\n"
            for p in self.points
        )

    @staticmethod
    def from_jsonl(text):
        curves = Curves()
        for line in text.splitlines():
            if line.strip():
                obj = json.loads(line)
                curves.append(CurvePoint(**obj))
        return curves


@dataclass
class TrainResult:
    model: object
    curves: Curves
    best_dev_nll: float
    best_update: int
    updates_run: int


def dev_metric_for_task(task, metrics):
    return metrics["error_rate"] if task == "rarest" else metrics["token_accuracy"]


def train(model_cfg: ModelConfig, batch_stream, dev_examples, cfg: TrainConfig,
          log=None):
    """Teacher-forced minibatch NLL minimization with observed switches.

    batch_stream is an iterator of batch dicts; evaluation runs every
    eval_every updates on dev_examples, the best-dev parameters are kept,
    and training stops after early_stop_patience evaluations without dev
    NLL improvement or at max_updates. NaN loss aborts with a diagnostic.
    """
    model = build_model(
        model_cfg, seed=cfg.seed, dtype=np.float32,
        switch_bias_init=cfg.switch_bias_init,
    )
    store = model.store
    opt = make_optimizer(cfg, store)
    curves = Curves()
    best = (np.inf, 0, store.copy_values())
    itemp = cfg.inverse_temperature
    train_nll_sum = 0.0
    train_steps = 0
    bad_evals = 0
    update = 0
    while update < cfg.max_updates:
        batch = next(batch_stream)
        update += 1
        store.zero_grads()
        try:
            loss, steps = model.batch_nll(batch, itemp)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise ValueError("non-finite loss")
            nc.backward(loss)
        except ValueError as exc:
            if "non-finite" not in str(exc):
                raise
            worst = next(
                (n for n in store.names()
                 if not np.isfinite(store.values[n]).all()),
                "<none>",
            )
            raise NumericalError(
                f"aborting at update {update} (batch of "
                f"{batch['target'].shape[0]}): {exc}; "
                f"first non-finite slot {worst!r}"
            ) from exc
        clip_global_norm(store, cfg.max_grad_norm)
        opt.step()
        train_nll_sum += loss_val * batch["target"].shape[0]
        train_steps += steps
        if cfg.eval_every > 0 and update % cfg.eval_every == 0:
            metrics = evaluate(model, dev_examples, itemp)
            point = CurvePoint(
                updates=update,
                train_nll=train_nll_sum / max(train_steps, 1),
                dev_nll=metrics["mean_step_nll"],
                dev_metric=dev_metric_for_task(model_cfg.task, metrics),
            )
            curves.append(point)
            if log:
                log(
                    f"update {update}: train_nll {point.train_nll:.4f} "
                    f"dev_nll {point.dev_nll:.4f} dev_metric {point.dev_metric:.4f}"
                )
            train_nll_sum = 0.0
            train_steps = 0
            if point.dev_nll < best[0]:
                best = (point.dev_nll, update, store.copy_values())
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.early_stop_patience:
                    break
    store.load_values(best[2])
    return TrainResult(
        model=model,
        curves=curves,
        best_dev_nll=float(best[0]),
        best_update=best[1],
        updates_run=update,
    )


def softmax_only_baseline(model_cfg: ModelConfig):
    """Same encoder/summary network with a single word softmax: over the
    whole vocabulary for the summary task, over the shortlist otherwise.
    No switch, no location head."""
    return ModelConfig(**{**model_cfg.to_meta(), "pointer": False})
