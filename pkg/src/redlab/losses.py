"""Training objectives: supervised source loss, confidence-thresholded
self-training, domain-adversarial loss, the swapped-extractor disentanglement
loss, the transition-matrix estimate and the trace (disagreement) loss.

Every loss accepts an optional :class:`Features` cache so the trainer can run
each extractor once per batch.  Passing ``reversal`` to :func:`red_losses`
inserts the gradient-reversal and stop-gradient placements that let a single
backward pass produce the per-group updates of the min-max objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_PROB, Tensor
from .nets import RedModel


@dataclass
class Features:
    """Extractor outputs for one (source, target) batch pair."""

    c_s: Tensor
    es_s: Tensor
    et_s: Tensor
    c_t: Tensor
    es_t: Tensor
    et_t: Tensor

    @classmethod
    def compute(cls, model: RedModel, xs, xt) -> Features:
        xs, xt = ad.as_tensor(xs), ad.as_tensor(xt)
        return cls(model.g_c(xs), model.g_es(xs), model.g_et(xs),
                   model.g_c(xt), model.g_es(xt), model.g_et(xt))


@dataclass
class TransitionMatrix:
    m: np.ndarray
    count_or_weight: float
    tensor: Tensor | None = None

    @property
    def trace(self) -> float:
        return float(np.trace(self.m))

    def check(self, tol: float = 1e-9) -> None:
        if np.any(self.m < 0):
            raise AssertionError("transition matrix has negative entries")
        if abs(self.m.sum() - 1.0) > tol:
            raise AssertionError(f"transition matrix mass {self.m.sum()!r} != 1")
        if not -tol <= self.trace <= 1.0 + tol:
            raise AssertionError(f"transition matrix trace {self.trace!r} outside [0, 1]")


@dataclass
class LossBundle:
    l_s: Tensor
    l_t: Tensor
    l_adv: Tensor
    l_dt: Tensor
    l_tr: Tensor
    trace_soft: float
    trace_hard: float
    lambda_value: float
    accepted_t: int = 0
    accepted_dt: int = 0
    transition: TransitionMatrix | None = None
    transition_hard: TransitionMatrix | None = None

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_s", "l_t", "l_adv", "l_dt", "l_tr")}

    def finite(self) -> bool:
        return all(np.isfinite(v) for v in self.values().values())


def _check_batch(x, what: str) -> None:
    if np.asarray(ad.as_tensor(x).data).shape[0] == 0:
        raise ValueError(f"{what} batch is empty")


def pseudo_labels(probs: Tensor, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of rows whose max probability exceeds ``tau`` and their argmax labels."""
    p = probs.data
    accepted = np.flatnonzero(p.max(axis=1) > tau)
    return accepted, p[accepted].argmax(axis=1)


def _masked_ce(probs: Tensor, accepted: np.ndarray, labels: np.ndarray) -> Tensor:
    if accepted.size == 0:
        return Tensor(0.0)
    return ad.cross_entropy(ad.take_rows(probs, accepted), labels)


def _pl_probs(model: RedModel, feats: Features, source: str, env: str) -> Tensor:
    # evaluated on detached features: pseudo-labels never carry gradient
    if source == "causal":
        z = ad.stop_gradient(feats.c_t)
    elif source == "fused":
        e = feats.et_t if env == "target" else feats.es_t
        z = model.mix(ad.stop_gradient(feats.c_t), ad.stop_gradient(e), ad.stop_gradient(model.lam()))
    else:
        raise ValueError(f"unknown pseudo-label source {source!r}")
    return ad.stop_gradient(ad.softmax_rows(model.h(z)))


def loss_source(model: RedModel, xs, ys, feats: Features | None = None) -> Tensor:
    _check_batch(xs, "source")
    if feats is None:
        xs = ad.as_tensor(xs)
        z = model.mix(model.g_c(xs), model.g_es(xs))
    else:
        z = model.mix(feats.c_s, feats.es_s)
    return ad.cross_entropy(ad.softmax_rows(model.h(z)), ys)


def loss_target_selftrain(model: RedModel, xt, tau: float, pl_source: str = "fused",
                          feats: Features | None = None, student_x=None) -> tuple[Tensor, int]:
    """Cross-entropy of the fused target prediction on confidently pseudo-labelled rows.

    ``student_x`` optionally supplies a perturbed copy of ``xt`` whose fused
    prediction is trained against labels taken from the clean view.
    """
    if feats is None:
        xt_t = ad.as_tensor(xt)
        c_t, et_t = model.g_c(xt_t), model.g_et(xt_t)
        feats = Features(c_t, c_t, c_t, c_t, c_t, et_t)
    accepted, labels = pseudo_labels(_pl_probs(model, feats, pl_source, "target"), tau)
    if student_x is not None:
        sx = ad.as_tensor(student_x)
        z = model.mix(model.g_c(sx), model.g_et(sx))
    else:
        z = model.mix(feats.c_t, feats.et_t)
    probs = ad.softmax_rows(model.h(z))
    return _masked_ce(probs, accepted, labels), int(accepted.size)


def _bce_domain(d_s: Tensor, d_t: Tensor) -> Tensor:
    src = ad.mean(ad.log(ad.clamp(d_s, EPS_PROB, 1.0)))
    tgt = ad.mean(ad.log(ad.clamp(ad.sub(1.0, d_t), EPS_PROB, 1.0)))
    return ad.scale(ad.add(src, tgt), -1.0)


def loss_adversarial(model: RedModel, xs, xt, mode: str | None = None,
                     feats: Features | None = None, reversal: float | None = None,
                     detach_lambda: bool = False) -> Tensor:
    """Domain-classification loss of the discriminator on fused features.

    With ``reversal`` set, fused features pass through a gradient-reversal
    layer of that coefficient, so descending this loss trains the
    discriminator while pushing extractors the other way.
    """
    _check_batch(xs, "source")
    _check_batch(xt, "target")
    if feats is None:
        feats = Features.compute(model, xs, xt)
    lam = model.lam()
    if detach_lambda:
        lam = ad.stop_gradient(lam)
    z_s = model.mix(feats.c_s, feats.es_s, lam)
    z_t = model.mix(feats.c_t, feats.et_t, lam)
    if reversal is not None:
        z_s, z_t = ad.grad_reverse(z_s, reversal), ad.grad_reverse(z_t, reversal)
    p_s = p_t = None
    if (mode or model.dims.disc_mode) == "conditional":
        # class-probability conditioning is treated as an input, not a path to h
        p_s = ad.stop_gradient(ad.softmax_rows(model.h(z_s)))
        p_t = ad.stop_gradient(ad.softmax_rows(model.h(z_t)))
    return _bce_domain(model.discriminate(z_s, p_s, mode), model.discriminate(z_t, p_t, mode))


def loss_disentangle(model: RedModel, xs, ys, xt, tau: float, pl_source: str = "causal",
                     feats: Features | None = None, reversal: float | None = None) -> tuple[Tensor, int]:
    """Swapped-extractor loss: source rows through g_et, target rows through g_es."""
    _check_batch(xs, "source")
    if feats is None:
        feats = Features.compute(model, xs, xt)
    et_s, es_t = feats.et_s, feats.es_t
    if reversal is not None:
        et_s, es_t = ad.grad_reverse(et_s, reversal), ad.grad_reverse(es_t, reversal)
    src = ad.cross_entropy(ad.softmax_rows(model.h(model.mix(feats.c_s, et_s))), ys)
    accepted, labels = pseudo_labels(_pl_probs(model, feats, pl_source, "target"), tau)
    probs_t = ad.softmax_rows(model.h(model.mix(feats.c_t, es_t)))
    return ad.add(src, _masked_ce(probs_t, accepted, labels)), int(accepted.size)


def _env_probs(model: RedModel, feats: Features, detach: bool) -> tuple[Tensor, Tensor]:
    es, et = feats.es_t, feats.et_t
    if detach:
        es, et = ad.stop_gradient(es), ad.stop_gradient(et)
    return ad.softmax_rows(model.h(es)), ad.softmax_rows(model.h(et))


def _hard(p: np.ndarray) -> np.ndarray:
    return ad.one_hot(p.argmax(axis=1), p.shape[1])


def estimate_transition(model: RedModel, xt, hard: bool = False,
                        feats: Features | None = None) -> TransitionMatrix:
    """Batch mean of outer(h∘g_es(x), h∘g_et(x)) over target rows."""
    _check_batch(xt, "target")
    if feats is None:
        xt_t = ad.as_tensor(xt)
        es, et = model.g_es(xt_t), model.g_et(xt_t)
        feats = Features(es, es, et, es, es, et)
    return transition_from_probs(*_env_probs(model, feats, detach=True), hard=hard)


def transition_from_probs(p_es, p_et, hard: bool = False) -> TransitionMatrix:
    """Mean over rows of outer(p_es[i], p_et[i]); ``hard`` swaps rows for argmax one-hots."""
    p_es, p_et = ad.as_tensor(p_es), ad.as_tensor(p_et)
    n = p_es.shape[0]
    if hard:
        m = _hard(p_es.data).T @ _hard(p_et.data) / n
        return TransitionMatrix(m, n)
    m_t = ad.scale(ad.matmul(ad.transpose(p_es), p_et), 1.0 / n)
    return TransitionMatrix(m_t.data.copy(), n, m_t)


def trace_soft_inner(model: RedModel, xt, feats: Features | None = None) -> Tensor:
    """Mean inner product of the two environmental probability rows (= tr of the soft estimate)."""
    _check_batch(xt, "target")
    if feats is None:
        xt_t = ad.as_tensor(xt)
        es, et = model.g_es(xt_t), model.g_et(xt_t)
        feats = Features(es, es, et, es, es, et)
    p_es, p_et = _env_probs(model, feats, detach=True)
    return ad.mean(ad.rows_dot(p_es, p_et))


def loss_trace(model: RedModel, xt, feats: Features | None = None,
               trace_value: Tensor | None = None) -> Tensor:
    """(1 - λ)(1 - tr M̂); reaches only λ and h."""
    tr = trace_soft_inner(model, xt, feats) if trace_value is None else trace_value
    return ad.mul(ad.sub(1.0, model.lam()), ad.sub(1.0, tr))


def red_losses(model: RedModel, xs, ys, xt, *, tau: float = 0.95,
               pl_source_lt: str = "fused", pl_source_ldt: str = "causal",
               disc_mode: str | None = None, reversal: float | None = None,
               trace_prev: float | None = None, trace_ema: float = 0.0,
               student_xt=None) -> LossBundle:
    """All losses on one batch pair.

    ``reversal=None`` builds the plain losses.  Otherwise it is the gradient
    reversal coefficient applied to the adversarial path (λ is detached there),
    and the swapped environmental features of the disentanglement loss get a
    unit reversal, so that ``consolidated_objective`` can be descended in one pass.
    """
    xs_t, xt_t = ad.as_tensor(xs), ad.as_tensor(xt)
    _check_batch(xs_t, "source")
    _check_batch(xt_t, "target")
    feats = Features.compute(model, xs_t, xt_t)
    l_s = loss_source(model, xs_t, ys, feats)
    l_t, acc_t = loss_target_selftrain(model, xt_t, tau, pl_source_lt, feats, student_xt)
    l_adv = loss_adversarial(model, xs_t, xt_t, disc_mode, feats, reversal,
                             detach_lambda=reversal is not None)
    l_dt, acc_dt = loss_disentangle(model, xs_t, ys, xt_t, tau, pl_source_ldt, feats,
                                    1.0 if reversal is not None else None)
    tr = trace_soft_inner(model, xt_t, feats)
    if trace_prev is not None and trace_ema > 0.0:
        tr = ad.add(ad.scale(tr, 1.0 - trace_ema), trace_ema * trace_prev)
    l_tr = loss_trace(model, xt_t, feats, tr)
    soft = estimate_transition(model, xt_t, False, feats)
    hard = estimate_transition(model, xt_t, True, feats)
    return LossBundle(l_s, l_t, l_adv, l_dt, l_tr, tr.item(), hard.trace,
                      model.lambda_value, acc_t, acc_dt, soft, hard)
