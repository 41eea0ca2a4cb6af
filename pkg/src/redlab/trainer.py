"""Training loop: batch sampling, loss assembly, the six parameter-update
groups, momentum SGD, evaluation, A-distance probing and ablation runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .losses import LossBundle, red_losses
from .nets import GROUPS, ModelDims, RedModel

METRICS_HEADER = ("epoch", "iter", "l_s", "l_t", "l_adv", "l_dt", "l_tr", "lambda",
                  "trace_soft", "trace_hard", "src_acc", "tgt_acc", "a_dist")


class NumericAbort(RuntimeError):
    """Raised when a loss or parameter goes non-finite; carries a state dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class RunConfig:
    seed: int = 0
    max_epochs: int = 30
    iters_per_epoch: int = 16
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.95
    grl_coeff: float = 1.0
    grl_schedule: str = "constant"
    disc_mode: str = "conditional"
    pl_source_for_ldt: str = "causal"
    pl_source_for_lt: str = "fused"
    use_lt: bool = True
    use_ldt: bool = True
    lambda_fixed: float | None = None
    trace_ema: float = 0.0
    input_noise: float = 0.0
    feat_dim: int = 16
    hidden_dim: int = 64
    feat_act: str = "relu"
    C: int = 4
    input_dim: int = 16
    update_impl: str = "consolidated"
    a_dist_every_epoch: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate: must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha: alpha and beta must be non-negative")
        if not 1.0 / self.C < self.tau <= 1.0:
            raise ValueError(f"tau: must lie in (1/C, 1], got {self.tau}")
        if self.grl_coeff < 0:
            raise ValueError("grl_coeff: must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum: must lie in [0, 1)")
        if not 0.0 <= self.trace_ema < 1.0:
            raise ValueError("trace_ema: must lie in [0, 1)")
        checks = {
            "grl_schedule": ("constant", "dann"),
            "disc_mode": ("conditional", "plain"),
            "pl_source_for_ldt": ("causal", "fused"),
            "pl_source_for_lt": ("causal", "fused"),
            "update_impl": ("consolidated", "reference"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}: expected one of {allowed}, got {getattr(self, name)!r}")
        if self.lambda_fixed is not None and not 0.0 <= self.lambda_fixed <= 1.0:
            raise ValueError("lambda_fixed: must lie in [0, 1]")
        for name in ("max_epochs", "iters_per_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be positive")

    def dims(self) -> ModelDims:
        return ModelDims(self.input_dim, self.C, self.feat_dim, self.hidden_dim,
                         self.hidden_dim, self.disc_mode,
                         self.feat_act)

    def replace(self, **kw) -> RunConfig:
        return dataclasses.replace(self, **kw)


@dataclass
class MetricsRecord:
    epoch: int
    iter: int
    l_s: float
    l_t: float
    l_adv: float
    l_dt: float
    l_tr: float
    lam: float
    trace_soft: float
    trace_hard: float
    src_acc: float
    tgt_acc: float | None = None
    a_dist: float | None = None

    def row(self) -> list[str]:
        vals = dataclasses.astuple(self)
        out = [str(self.epoch), str(self.iter)]
        out += ["" if v is None else f"{v:.9g}" for v in vals[2:]]
        return out


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(metrics_csv_text(records))


def metrics_csv_text(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def sgd_update(params: list[np.ndarray], grads: list[np.ndarray], lr: float,
               momentum: float = 0.0, velocity: list[np.ndarray] | None = None):
    """One heavy-ball step ``v <- momentum*v + g; p <- p - lr*v``; returns (params, velocity)."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity, strict=True):
        if p.shape != g.shape:
            raise ad.DimensionError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class Optimizer:
    """Momentum SGD over a model's parameter groups."""

    def __init__(self, model: RedModel, lr: float, momentum: float):
        self.model, self.lr, self.momentum = model, lr, momentum
        self.velocity: dict[str, list[np.ndarray]] = {}

    def step(self, grads: dict[str, list[np.ndarray]]) -> None:
        for name, params in self.model.groups().items():
            if not params:
                continue
            values = [p.data for p in params]
            new, self.velocity[name] = sgd_update(values, grads[name], self.lr, self.momentum,
                                                  self.velocity.get(name))
            for p, v in zip(params, new):
                p.data = v


def adversarial_coeff(cfg: RunConfig, progress: float) -> float:
    """Effective reversal weight on the extractors: alpha times the GRL coefficient."""
    c = cfg.grl_coeff
    if cfg.grl_schedule == "dann":
        c *= 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0
    return cfg.alpha * c


def _losses(model, xs, ys, xt, cfg, reversal, trace_prev=None, student_xt=None) -> LossBundle:
    return red_losses(model, xs, ys, xt, tau=cfg.tau, pl_source_lt=cfg.pl_source_for_lt,
                      pl_source_ldt=cfg.pl_source_for_ldt, disc_mode=cfg.disc_mode,
                      reversal=reversal, trace_prev=trace_prev, trace_ema=cfg.trace_ema,
                      student_xt=student_xt)


def _grads_of(params: list[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def consolidated_objective(b: LossBundle, cfg: RunConfig) -> Tensor:
    total = ad.add(b.l_s, b.l_adv)
    if cfg.use_lt:
        total = ad.add(total, b.l_t)
    if cfg.use_ldt:
        total = ad.add(total, b.l_dt)
    if cfg.beta:
        total = ad.add(total, ad.scale(b.l_tr, cfg.beta))
    return total


def consolidated_grads(model: RedModel, xs, ys, xt, cfg: RunConfig, adv: float,
                       trace_prev=None, student_xt=None):
    """Per-group gradients from one backward pass through GRL/stop-gradient placements."""
    model.zero_grad()
    with Tape() as tape:
        bundle = _losses(model, xs, ys, xt, cfg, adv, trace_prev, student_xt)
        total = consolidated_objective(bundle, cfg)
    _abort_if_nonfinite(model, bundle)
    tape.backward(total)
    grads = {name: _grads_of(ps) for name, ps in model.groups().items()}
    model.zero_grad()
    return grads, bundle


def group_objectives(b: LossBundle, cfg: RunConfig, adv: float) -> dict[str, Tensor]:
    """The loss each parameter group descends, written out explicitly."""
    zero = Tensor(0.0)
    l_t = b.l_t if cfg.use_lt else zero
    l_dt = b.l_dt if cfg.use_ldt else zero
    neg_adv = ad.scale(b.l_adv, -adv)
    cls_tr = ad.add(ad.add(ad.add(b.l_s, l_t), l_dt), ad.scale(b.l_tr, cfg.beta))
    return {
        "g_c": ad.add(ad.add(ad.add(b.l_s, l_t), l_dt), neg_adv),
        "g_es": ad.add(ad.sub(b.l_s, l_dt), neg_adv),
        "g_et": ad.add(ad.sub(l_t, l_dt), neg_adv),
        "lambda": cls_tr,
        "h": cls_tr,
        "d": b.l_adv,
    }


def reference_grads(model: RedModel, xs, ys, xt, cfg: RunConfig, adv: float,
                    trace_prev=None, student_xt=None):
    """Per-group gradients from six separate backward passes on plain losses."""
    grads, bundle = {}, None
    for name, params in model.groups().items():
        model.zero_grad()
        with Tape() as tape:
            b = _losses(model, xs, ys, xt, cfg, None, trace_prev, student_xt)
            obj = group_objectives(b, cfg, adv)[name]
        bundle = bundle or b
        _abort_if_nonfinite(model, b)
        if params and obj._tape is tape:
            tape.backward(obj)
        grads[name] = _grads_of(params)
    model.zero_grad()
    return grads, bundle


def _abort_if_nonfinite(model: RedModel, bundle: LossBundle) -> None:
    if not bundle.finite():
        raise NumericAbort("non-finite loss", {"losses": bundle.values(), "state": model.state()})


class BatchSampler:
    """Epoch-shuffled sampling without replacement, independent per domain."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self._order = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._order.size:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


@dataclass
class TrainState:
    model: RedModel
    optimizer: Optimizer
    rng: np.random.Generator
    trace_prev: float | None = None
    step: int = 0
    last_bundle: LossBundle | None = None


def train_step(state: TrainState, xs, ys, xt, cfg: RunConfig, progress: float = 0.0,
               epoch: int = 0, it: int = 0) -> MetricsRecord:
    """One update of every group; returns the iteration's telemetry."""
    model = state.model
    adv = adversarial_coeff(cfg, progress)
    student = None
    if cfg.input_noise > 0:
        student = xt + cfg.input_noise * state.rng.standard_normal(np.shape(xt))
    grad_fn = consolidated_grads if cfg.update_impl == "consolidated" else reference_grads
    try:
        grads, b = grad_fn(model, xs, ys, xt, cfg, adv, state.trace_prev, student)
    except FloatingPointError as exc:
        raise NumericAbort(str(exc), {"state": model.state(), "step": state.step}) from exc
    state.optimizer.step(grads)
    if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
        raise NumericAbort("non-finite parameters after update", {"state": model.state()})
    state.trace_prev = b.trace_soft
    state.last_bundle = b
    state.step += 1
    src_pred = ad.softmax_rows(model.h(model.mix(model.g_c(Tensor(xs)), model.g_es(Tensor(xs)))))
    vals = b.values()
    return MetricsRecord(epoch, it, vals["l_s"], vals["l_t"], vals["l_adv"], vals["l_dt"],
                         vals["l_tr"], b.lambda_value, b.trace_soft, b.trace_hard,
                         float(np.mean(src_pred.data.argmax(axis=1) == np.asarray(ys))))


def evaluate(model: RedModel, x, y) -> tuple[float, np.ndarray]:
    """Accuracy of the causal path argmax(h∘g_c(x)), overall and per class."""
    if y is None:
        raise ValueError("evaluation needs ground-truth labels")
    y = np.asarray(y)
    pred = model.predict_causal(Tensor(x)).data.argmax(axis=1)
    per_class = np.array([np.mean(pred[y == k] == k) if np.any(y == k) else np.nan
                          for k in range(model.dims.num_classes)])
    return float(np.mean(pred == y)), per_class


def fused_features(model: RedModel, xs, xt) -> tuple[np.ndarray, np.ndarray]:
    return model.fuse(Tensor(xs), "source").data, model.fuse(Tensor(xt), "target").data


def a_distance(features_s, features_t, seed: int = 0) -> float:
    """Proxy A-distance 2(1 - 2ε) from a logistic domain probe's held-out error ε."""
    from sklearn.linear_model import LogisticRegression

    fs, ft = np.asarray(features_s, dtype=float), np.asarray(features_t, dtype=float)
    if len(fs) < 4 or len(ft) < 4:
        raise ValueError("a_distance needs at least 4 samples per domain")
    rng = np.random.default_rng(seed)
    ps, pt = rng.permutation(len(fs)), rng.permutation(len(ft))
    hs, ht = len(fs) // 2, len(ft) // 2
    x_tr = np.vstack([fs[ps[:hs]], ft[pt[:ht]]])
    y_tr = np.r_[np.zeros(hs), np.ones(ht)]
    x_te = np.vstack([fs[ps[hs:]], ft[pt[ht:]]])
    y_te = np.r_[np.zeros(len(fs) - hs), np.ones(len(ft) - ht)]
    mu, sd = x_tr.mean(axis=0), x_tr.std(axis=0) + 1e-12
    probe = LogisticRegression(max_iter=1000)
    probe.fit((x_tr - mu) / sd, y_tr)
    err = float(np.mean(probe.predict((x_te - mu) / sd) != y_te))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def _subsample(n: int, k: int, rng) -> np.ndarray:
    return np.arange(n) if n <= k else np.sort(rng.choice(n, size=k, replace=False))


def train(model: RedModel, xs, ys, xt, cfg: RunConfig, yt_eval=None,
          on_record=None, on_step=None) -> tuple[RedModel, list[MetricsRecord]]:
    """Run every epoch of the loop; ``yt_eval`` is used only for telemetry.

    ``on_record(rec)`` sees each telemetry row; ``on_step(state)`` sees the
    train state, whose ``last_bundle`` holds the step's losses and M̂.
    """
    rng = np.random.default_rng([cfg.seed, 7])
    state = TrainState(model, Optimizer(model, cfg.learning_rate, cfg.momentum), rng)
    s_sampler = BatchSampler(len(xs), cfg.batch_size, np.random.default_rng([cfg.seed, 11]))
    t_sampler = BatchSampler(len(xt), cfg.batch_size, np.random.default_rng([cfg.seed, 13]))
    ys = np.asarray(ys)
    total = cfg.max_epochs * cfg.iters_per_epoch
    records: list[MetricsRecord] = []
    try:
        _epochs(state, xs, ys, xt, cfg, yt_eval, on_record, on_step, s_sampler, t_sampler,
                total, records)
    except FloatingPointError as exc:
        # evaluation or telemetry overflowed after an update went bad
        raise NumericAbort(str(exc), {"state": model.state(), "step": state.step}) from exc
    return model, records


def _epochs(state, xs, ys, xt, cfg, yt_eval, on_record, on_step, s_sampler, t_sampler, total,
            records):
    model = state.model
    for epoch in range(cfg.max_epochs):
        for it in range(cfg.iters_per_epoch):
            si, ti = s_sampler.next(), t_sampler.next()
            rec = train_step(state, xs[si], ys[si], xt[ti], cfg,
                             state.step / max(total, 1), epoch, it)
            if it == cfg.iters_per_epoch - 1:
                if yt_eval is not None:
                    rec.tgt_acc = evaluate(model, xt, yt_eval)[0]
                if cfg.a_dist_every_epoch:
                    ev = np.random.default_rng([cfg.seed, 17, epoch])
                    fs, ft = fused_features(model, xs[_subsample(len(xs), 500, ev)],
                                            xt[_subsample(len(xt), 500, ev)])
                    rec.a_dist = a_distance(fs, ft, seed=cfg.seed)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if on_step is not None:
                on_step(state)


def init_model(cfg: RunConfig) -> RedModel:
    return RedModel.init(cfg.dims(), seed=cfg.seed, lambda_fixed=cfg.lambda_fixed)


VARIANTS: dict[str, dict] = {
    "red": {},
    "red_wo_ltr": {"beta": 0.0},
    "red_wo_ldt_ltr": {"beta": 0.0, "use_ldt": False},
    "source_adv": {"beta": 0.0, "use_ldt": False, "use_lt": False},
    "self_train": {"beta": 0.0, "use_ldt": False, "alpha": 0.0},
}
SOURCE_ONLY = {"beta": 0.0, "use_ldt": False, "use_lt": False, "alpha": 0.0}


def run_variant(cfg: RunConfig, spec, overrides: dict, seed: int, **train_kw):
    """Generate data for ``seed``, train one configuration and return (model, records, accuracy)."""
    from .synthgen import generate

    spec = dataclasses.replace(spec, seed=seed)
    src, tgt, _ = generate(spec)
    run_cfg = cfg.replace(seed=seed, input_dim=spec.dim, C=spec.C, **overrides)
    model = init_model(run_cfg)
    model, records = train(model, src.x, src.y, tgt.x, run_cfg, yt_eval=tgt.y, **train_kw)
    return model, records, evaluate(model, tgt.x, tgt.y)[0]


def ablate(cfg: RunConfig, spec, seeds, variants: dict[str, dict] | None = None,
           workers: int = 1) -> list[dict]:
    """Mean ± std causal-path target accuracy of each variant over a shared seed set."""
    variants = VARIANTS if variants is None else variants
    jobs = [(name, seed) for name in variants for seed in seeds]

    def one(job):
        name, seed = job
        cfg_v = cfg.replace(a_dist_every_epoch=False)
        try:
            return run_variant(cfg_v, spec, variants[name], seed)[2]
        except Exception as exc:
            raise RuntimeError(f"variant {name!r}, seed {seed}: {exc}") from exc

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(one, jobs))
    else:
        accs = [one(j) for j in jobs]
    table = []
    for name in variants:
        vals = np.array([a for (n, _), a in zip(jobs, accs) if n == name])
        table.append({"variant": name, "mean": float(vals.mean()),
                      "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                      "n": len(vals), "accs": vals.tolist()})
    return table


def write_ablation_csv(table: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean_acc", "std_acc", "n_seeds", "accs"])
        for row in table:
            w.writerow([row["variant"], f"{row['mean']:.9g}", f"{row['std']:.9g}", row["n"],
                        json.dumps([round(a, 9) for a in row["accs"]])])


def dump_abort(exc: NumericAbort, path) -> None:
    state = exc.dump.get("state", {})
    np.savez(Path(path), **{k: np.asarray(v) for k, v in state.items()},
             __losses__=np.array(json.dumps(exc.dump.get("losses", {}))))
