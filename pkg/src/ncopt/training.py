"""Policy learning: teacher-forced supervised losses, REINFORCE with baselines, Adam."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .decoder import ArContext, ar_step_logits, rollout, sample_from
from .encoder import add_linear, encode, init_encoder_params, linear
from .instances import GraphBatch, TspInstance, batch_tour_lengths, canonical_tour, read_dataset
from .model import Model, ModelConfig
from .search import greedy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    paradigm: str = "sl"
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    train_path: str | None = None
    n_min: int = 20
    n_max: int = 50
    samples_per_epoch: int = 128_000
    baseline: str = "rollout"
    baseline_eval_size: int = 1000
    baseline_alpha: float = 0.05
    ema_beta: float = 0.99
    class_weighted: bool = True
    val_sizes: Sequence[int] = ()
    val_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.paradigm not in ("sl", "rl"):
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.baseline not in ("critic", "rollout", "ema"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.n_min > self.n_max:
            raise ValueError("n_min exceeds n_max")
        if self.paradigm == "rl" and self.model.decoder != "ar":
            raise ValueError("reinforcement learning is implemented for the AR decoder only")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val_sizes"] = list(self.val_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ----------------------------------------------------------------------------
# supervised losses
# ----------------------------------------------------------------------------

def teacher_forced_log_probs(model: Model, fixed, tours: np.ndarray) -> Tensor:
    """log p(tour[t] | tour[:t]) for t = 1..n-1, shape (B, n-1), all steps at once."""
    b, n = tours.shape
    steps = n - 1
    pos = np.empty_like(tours)
    np.put_along_axis(pos, tours, np.arange(n)[None].repeat(b, 0), axis=1)
    # node j is visited before step t iff its position < t
    visited = pos[:, None, :] < np.arange(1, n)[None, :, None]
    first = np.repeat(tours[:, :1], steps, axis=1)
    last = tours[:, :-1]
    logits = ar_step_logits(fixed, model.params, first, last, visited,
                            model.config.heads, model.config.clip)
    return ad.pick(ad.log_softmax(logits, axis=-1), tours[:, 1:])


def tour_log_likelihood(model: Model, fixed, tours: np.ndarray) -> Tensor:
    """Differentiable log p(tour) per instance (B,), the tour's first node given."""
    return ad.sum_(teacher_forced_log_probs(model, fixed, tours), axis=1)


def sl_loss_ar(model: Model, batch: GraphBatch, tours: np.ndarray, training: bool = True) -> Tensor:
    """Mean over instances of the summed per-step cross-entropy against the label tour."""
    tours = np.stack([canonical_tour(t) for t in tours])
    _, h, hg = model.embed(batch, training=training)
    ll = tour_log_likelihood(model, model.ar_fixed(h, hg), tours)
    return ad.scale(ad.mean(ll), -1.0)


def edge_targets(batch: GraphBatch, tours: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-edge labels (edge lies on the tour, either direction) and the number of
    tour edges missing from the sparse graph in both directions."""
    b, n = tours.shape
    on_tour = np.zeros((b, n, n), dtype=bool)
    rows = np.arange(b)[:, None]
    nxt = np.roll(tours, -1, axis=1)
    on_tour[rows, tours, nxt] = True
    on_tour[rows, nxt, tours] = True
    g = batch.src // n
    y = on_tour[g, batch.src % n, batch.dst % n]
    adj = np.zeros((b, n, n), dtype=bool)
    adj[g, batch.src % n, batch.dst % n] = True
    covered = adj | adj.transpose(0, 2, 1)
    missing = int((on_tour & ~covered).sum() // 2)
    return y, missing


def sl_loss_nar(model: Model, batch: GraphBatch, tours: np.ndarray, class_weighted: bool = True,
                training: bool = True) -> tuple[Tensor, dict]:
    """Mean binary cross-entropy over sparse edges.

    With ``class_weighted`` positive edges are weighted by #edges / #positive.
    """
    state, _, hg = model.embed(batch, training=training)
    logits = model.nar_logits(state, hg, batch)
    y, missing = edge_targets(batch, np.asarray(tours))
    return bce_from_logits(logits, y, class_weighted), {"excluded_tour_edges": missing,
                                                        "positive_edges": int(y.sum())}


def bce_from_logits(logits: Tensor, y: np.ndarray, class_weighted: bool = True) -> Tensor:
    e = y.size
    w_pos = e / max(int(y.sum()), 1) if class_weighted else 1.0
    weights = np.where(y, w_pos, 1.0).astype(logits.dtype)
    logp = ad.log_softmax(logits, axis=-1)
    ll = ad.pick(logp, y.astype(np.int64))
    return ad.scale(ad.sum_(ad.mul(ll, weights)), -1.0 / e)


# ----------------------------------------------------------------------------
# baselines
# ----------------------------------------------------------------------------

def ema_baseline_update(value: float | None, batch_mean: float, beta: float = 0.99) -> float:
    """``b <- beta * b + (1 - beta) * mean``; the first call returns the batch mean."""
    if value is None:
        return float(batch_mean)
    return float(beta * value + (1 - beta) * batch_mean)


class EmaBaseline:
    kind = "ema"

    def __init__(self, beta: float = 0.99):
        self.beta = beta
        self.value: float | None = None

    def evaluate(self, batch: GraphBatch, lengths: np.ndarray) -> np.ndarray:
        if self.value is None:
            self.value = float(lengths.mean())
        return np.full(lengths.shape, self.value)

    def observe(self, lengths: np.ndarray) -> None:
        self.value = ema_baseline_update(self.value, float(lengths.mean()), self.beta)


def greedy_lengths(model: Model, coords, chunk: int = 1000) -> np.ndarray:
    """Greedy lengths from node 0; ``coords`` is one (B, n, 2) array or a list of them."""
    groups = coords if isinstance(coords, (list, tuple)) else [coords]
    out = []
    for g in groups:
        for s in range(0, len(g), chunk):
            out.append(greedy(model.context(model.batch(g[s:s + chunk]))).lengths)
    return np.concatenate(out)


def baseline_eval_set(count: int, n_min: int, n_max: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Held-out instances spread evenly over the sizes in [n_min, n_max]."""
    sizes = np.arange(n_min, n_max + 1)
    per = np.full(len(sizes), count // len(sizes))
    per[:count % len(sizes)] += 1
    return [rng.random((int(c), int(n), 2)) for n, c in zip(sizes, per) if c > 0]


def paired_one_sided_p(candidate: np.ndarray, baseline: np.ndarray) -> float:
    """p-value of H1: mean(candidate - baseline) < 0."""
    diff = np.asarray(candidate) - np.asarray(baseline)
    spread = np.ptp(diff)
    if spread <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        # zero variance: the t statistic is undefined, decide by the sign
        m = float(diff.mean())
        return 0.5 if abs(m) <= 1e-12 else (0.0 if m < 0 else 1.0)
    return float(stats.ttest_rel(candidate, baseline, alternative="less").pvalue)


class RolloutBaseline:
    """Greedy rollout of a frozen policy copy, replaced after significant improvement."""
    kind = "rollout"

    def __init__(self, policy: Model, eval_coords, alpha: float = 0.05):
        self.alpha = alpha
        self.eval_coords = eval_coords
        self.frozen = policy.copy()
        self.eval_lengths = greedy_lengths(self.frozen, eval_coords)
        self.history: list[dict] = []

    def evaluate(self, batch: GraphBatch, lengths: np.ndarray) -> np.ndarray:
        return greedy(self.frozen.context(batch)).lengths

    def observe(self, lengths: np.ndarray) -> None:
        pass

    def update(self, policy: Model, epoch: int | None = None) -> bool:
        cand = greedy_lengths(policy, self.eval_coords)
        p = paired_one_sided_p(cand, self.eval_lengths)
        accepted = bool(cand.mean() < self.eval_lengths.mean() and p < self.alpha)
        self.history.append({"epoch": epoch, "candidate_mean": float(cand.mean()),
                             "baseline_mean": float(self.eval_lengths.mean()), "p_value": p,
                             "accepted": accepted})
        if accepted:
            self.frozen = policy.copy()
            self.eval_lengths = cand
        return accepted


class CriticBaseline:
    """Separate encoder + mean graph embedding + 2-layer MLP regressing tour length."""
    kind = "critic"

    def __init__(self, config: ModelConfig, rng: np.random.Generator, lr: float = 1e-4):
        self.config = config
        self.params, self.buffers = init_encoder_params(config.encoder, rng, prefix="critic.enc")
        d = config.encoder.hidden
        add_linear(self.params, "critic.h1", d, d, rng)
        add_linear(self.params, "critic.h2", d, 1, rng)
        self.adam = AdamState()
        self.lr = lr
        self.last_loss: float | None = None

    def value(self, batch: GraphBatch, training: bool = False) -> Tensor:
        state = encode(batch, self.config.encoder, self.params, self.buffers, training, prefix="critic.enc")
        d = self.config.encoder.hidden
        hg = ad.mean(ad.reshape(state.h, (batch.batch_size, batch.n, d)), axis=1)
        out = linear(ad.relu(linear(hg, self.params, "critic.h1")), self.params, "critic.h2")
        return ad.reshape(out, (batch.batch_size,))

    def loss(self, batch: GraphBatch, lengths: np.ndarray, training: bool = True) -> tuple[Tensor, Tensor]:
        pred = self.value(batch, training)
        diff = ad.sub(pred, Tensor(lengths.astype(pred.dtype)))
        return ad.mean(ad.mul(diff, diff)), pred

    def evaluate(self, batch: GraphBatch, lengths: np.ndarray) -> np.ndarray:
        """Return b(s) and take one MSE step on the observed lengths."""
        with Tape() as tape:
            loss, pred = self.loss(batch, lengths)
        grads = backward(tape, loss, self.params)
        adam_step(self.params, grads, self.adam, self.lr)
        self.last_loss = loss.item()
        return pred.data.astype(np.float64)

    def observe(self, lengths: np.ndarray) -> None:
        pass


# ----------------------------------------------------------------------------
# REINFORCE
# ----------------------------------------------------------------------------

def reinforce_gradient(model: Model, batch: GraphBatch, baseline, rng: np.random.Generator,
                       starts: np.ndarray | None = None, tours: np.ndarray | None = None):
    """Sample one tour per instance and return (gradient map, stats).

    The surrogate ``mean((L(pi) - b(s)) * log p(pi))`` has the REINFORCE
    estimate as its gradient.  ``tours`` may be supplied to reuse fixed
    rollouts (used for checks with a frozen sample).
    """
    b, n = batch.batch_size, batch.n
    with Tape() as tape:
        _, h, hg = model.embed(batch, training=True)
        fixed = model.ar_fixed(h, hg)
        if tours is None:
            if starts is None:
                starts = rng.integers(0, n, size=b)
            ctx = ArContext(fixed, model.params, batch.coords, model.config.heads, model.config.clip)
            tours = rollout(ctx, np.asarray(starts)[:, None], lambda lp: sample_from(lp, rng)).tours[:, 0]
        lengths = batch_tour_lengths(batch.coords, tours)
        base = np.asarray(baseline.evaluate(batch, lengths), dtype=np.float64)
        adv = lengths - base
        if not np.isfinite(adv).all():
            raise FloatingPointError("non-finite advantage")
        ll = tour_log_likelihood(model, fixed, tours)
        surrogate = ad.mean(ad.mul(ll, adv.astype(ll.dtype)))
    grads = backward(tape, surrogate, model.params)
    baseline.observe(lengths)
    return grads, {"mean_length": float(lengths.mean()), "mean_advantage": float(adv.mean()),
                   "mean_baseline": float(base.mean()), "tours": tours, "lengths": lengths}


# ----------------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    baseline_history: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _write_log(path, record: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _validation_sets(config: TrainConfig, rng: np.random.Generator):
    from .oracles import reference_tours
    from .instances import sample_instances

    sets = {}
    for n in config.val_sizes:
        insts = sample_instances(n, config.val_count, rng)
        sets[n] = (np.stack([i.coords for i in insts]), np.array([r.length for r in reference_tours(insts)]))
    return sets


def _val_gaps(model: Model, sets) -> dict:
    return {str(n): float(100 * np.mean(greedy_lengths(model, coords) / ref - 1))
            for n, (coords, ref) in sets.items()}


def sl_batches(data: Sequence[tuple[TspInstance, np.ndarray]], batch_size: int,
               rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch of same-size batches covering every labelled sample exactly once."""
    groups: dict[int, list[int]] = {}
    for k, (inst, _) in enumerate(data):
        groups.setdefault(inst.n, []).append(k)
    batches = []
    for n in sorted(groups):
        idx = rng.permutation(groups[n])
        for s in range(0, len(idx), batch_size):
            part = idx[s:s + batch_size]
            batches.append((np.stack([data[k][0].coords for k in part]), np.stack([data[k][1] for k in part])))
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


def train(config: TrainConfig, data: Sequence | None = None, init_model: Model | None = None,
          log_path=None, checkpoint_dir=None) -> TrainResult:
    """Train per ``config``; SL reads labelled ``data`` (or ``config.train_path``),
    RL samples fresh instances every epoch."""
    rng = np.random.default_rng(config.seed)
    model = init_model.copy() if init_model is not None else Model.init(config.model, rng)
    adam = AdamState()
    records: list[dict] = []
    ckpts: list[str] = []
    val_sets = _validation_sets(config, np.random.default_rng([config.seed, 1])) if config.val_count else {}
    if config.paradigm == "sl":
        if data is None:
            if config.train_path is None:
                raise ValueError("supervised training needs a labelled dataset")
            data = read_dataset(config.train_path)
        if any(t is None for _, t in data):
            raise ValueError("supervised training needs labels for every instance")
    baseline = None
    if config.paradigm == "rl":
        if config.baseline == "rollout":
            ev = baseline_eval_set(config.baseline_eval_size, config.n_min, config.n_max,
                                   np.random.default_rng([config.seed, 2]))
            baseline = RolloutBaseline(model, ev, config.baseline_alpha)
        elif config.baseline == "critic":
            baseline = CriticBaseline(config.model, rng, config.lr)
        else:
            baseline = EmaBaseline(config.ema_beta)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    start = time.time()
    seen = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        if config.paradigm == "sl":
            for coords, tours in sl_batches(data, config.batch_size, rng):
                batch = model.batch(coords)
                with Tape() as tape:
                    if model.config.decoder == "ar":
                        loss = sl_loss_ar(model, batch, tours)
                    else:
                        loss, _ = sl_loss_nar(model, batch, tours, config.class_weighted)
                adam_step(model.params, backward(tape, loss, model.params), adam, config.lr)
                losses.append(loss.item())
                seen += len(coords)
        else:
            remaining = config.samples_per_epoch
            while remaining > 0:
                bs = min(config.batch_size, remaining)
                n = int(rng.integers(config.n_min, config.n_max + 1))
                batch = model.batch(rng.random((bs, n, 2)))
                grads, st = reinforce_gradient(model, batch, baseline, rng)
                adam_step(model.params, grads, adam, config.lr)
                losses.append(st["mean_length"])
                remaining -= bs
                seen += bs
            if isinstance(baseline, RolloutBaseline):
                baseline.update(model, epoch)
        rec = {"epoch": epoch, "samples_seen": seen, "wall_time": time.time() - start,
               "train_loss": float(np.mean(losses)) if losses else None,
               "eval_gap_per_size": _val_gaps(model, val_sets) if val_sets else {}}
        if isinstance(baseline, RolloutBaseline):
            rec["baseline"] = baseline.history[-1]
        records.append(rec)
        _write_log(log_path, rec)
        log.info("epoch %d: %s", epoch, rec)
        if checkpoint_dir is not None:
            path = str(Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
            model.save(path, {"epoch": epoch, "samples_seen": seen, "train_config": config.to_dict()})
            ckpts.append(path)
    history = baseline.history if isinstance(baseline, RolloutBaseline) else []
    return TrainResult(model, records, history, ckpts)


def finetune(model: Model, config: TrainConfig, **kwargs) -> TrainResult:
    """Continue RL training from ``model`` (EMA baseline, as used for finetuning)."""
    cfg = TrainConfig(**{**config.to_dict(), "paradigm": "rl", "baseline": "ema", "model": model.config})
    return train(cfg, init_model=model, **kwargs)


@dataclass
class ActiveSearchResult:
    tours: list[np.ndarray]
    lengths: np.ndarray
    history: np.ndarray     # (epochs + 1, instances) best-so-far lengths


def active_search(model: Model, instances: Sequence[TspInstance], epochs: int = 10,
                  lr: float = 1e-5, batch_size: int = 128, beta: float = 0.99,
                  seed: int = 0) -> ActiveSearchResult:
    """Optimise the policy on exactly ``instances`` with an EMA baseline,
    keeping the best sampled tour per instance (initialised with greedy)."""
    rng = np.random.default_rng(seed)
    model = model.copy()
    adam = AdamState()
    baseline = EmaBaseline(beta)
    by_size: dict[int, list[int]] = {}
    for k, inst in enumerate(instances):
        by_size.setdefault(inst.n, []).append(k)
    best_len = np.full(len(instances), np.inf)
    best_tour: list[np.ndarray | None] = [None] * len(instances)

    def offer(idx, tours, lengths):
        for k, t, l in zip(idx, tours, lengths):
            if l < best_len[k]:
                best_len[k] = l
                best_tour[k] = np.array(t)

    for n, idx in by_size.items():
        coords = np.stack([instances[k].coords for k in idx])
        g = greedy(model.context(model.batch(coords)))
        offer(idx, g.tours, g.lengths)
    history = [best_len.copy()]
    for _ in range(epochs):
        for n, idx in by_size.items():
            idx = np.array(idx)
            for s in range(0, len(idx), batch_size):
                part = idx[s:s + batch_size]
                batch = model.batch(np.stack([instances[k].coords for k in part]))
                grads, st = reinforce_gradient(model, batch, baseline, rng)
                adam_step(model.params, grads, adam, lr)
                offer(part, st["tours"], st["lengths"])
        history.append(best_len.copy())
    return ActiveSearchResult(best_tour, best_len, np.array(history))
