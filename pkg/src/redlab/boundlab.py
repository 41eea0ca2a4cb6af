"""Exact checks of the target-error bound on finite input spaces.

On a finite domain every population quantity is a weighted sum, so the
inequality chain

    ε_T(f) ≤ ε_T(f, f_S) + ε_T(f_S, f_T)
           ≤ ε_S(f, f_S) + |ε_T(f, f_S) − ε_S(f, f_S)| + ε_T(f_S, f_T)
           ≤ ε_S(f, f_S) + d_H̃(D_S, D_T) + ε_T(f_S, f_T)
           = ε_S(f, f_S) + d_H̃(D_S, D_T) + (1 − λ)(1 − tr M)

can be evaluated term by term.  d_H̃ uses {0,1}-valued members
``1[|f − f'| > t]`` and is the supremum of their mean difference.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import TransitionMatrix

TOL = 1e-12
MAX_EXHAUSTIVE_N = 8


class SizeError(ValueError):
    pass


@dataclass
class FiniteInstance:
    w_s: np.ndarray
    w_t: np.ndarray
    hc: np.ndarray
    hes: np.ndarray
    het: np.ndarray
    lam: float
    f: np.ndarray

    def __post_init__(self):
        for name in ("w_s", "w_t", "f"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        for name in ("hc", "hes", "het"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.w_s.size
        if not 1 <= n <= 10:
            raise ValueError(f"|X| must be in 1..10, got {n}")
        for name in ("w_t", "hc", "hes", "het", "f"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        for name in ("w_s", "w_t"):
            w = getattr(self, name)
            if np.any(w < 0) or abs(w.sum() - 1.0) > TOL:
                raise ValueError(f"{name} must be a probability vector")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if np.any((self.f < 0) | (self.f > 1)):
            raise ValueError("f must map into [0, 1]")

    @property
    def n(self) -> int:
        return self.w_s.size

    @property
    def binary(self) -> bool:
        return all(np.isin(getattr(self, k), (0.0, 1.0)).all() for k in ("hc", "hes", "het"))

    def to_json(self) -> str:
        d = {k.name: getattr(self, k.name) for k in dataclasses.fields(self)}
        return json.dumps({k: v.tolist() if isinstance(v, np.ndarray) else v for k, v in d.items()})

    @classmethod
    def from_json(cls, text: str) -> FiniteInstance:
        return cls(**json.loads(text))


@dataclass
class BoundReport:
    eps_t_f: float
    eps_s_f_fs: float
    d_htilde: float
    disagreement_term: float
    lhs: float
    rhs: float
    holds: bool
    slack: float
    slack_half: float
    identity_residual: float
    steps_ok: tuple
    contract_ok: bool


def hypothesis_error(f, c, weights) -> float:
    """Σ_x w(x) |f(x) − c(x)|."""
    f, c, w = (np.asarray(a, dtype=np.float64) for a in (f, c, weights))
    return float(np.dot(w, np.abs(f - c)))


def labeling_functions(inst: FiniteInstance) -> tuple[np.ndarray, np.ndarray]:
    f_s = inst.lam * inst.hc + (1.0 - inst.lam) * inst.hes
    f_t = inst.lam * inst.hc + (1.0 - inst.lam) * inst.het
    return f_s, f_t


def exact_transition(inst: FiniteInstance) -> TransitionMatrix:
    """m_ij = Σ_x w_t(x) 1[hes(x)=i] 1[het(x)=j] over binary labels."""
    if not inst.binary:
        raise ValueError("exact_transition needs binary labelings")
    m = np.zeros((2, 2))
    np.add.at(m, (inst.hes.astype(int), inst.het.astype(int)), inst.w_t)
    return TransitionMatrix(m, 1.0)


def disagreement_identity_check(inst: FiniteInstance) -> float:
    """|ε_T(f_S, f_T) − (1 − λ)(1 − tr M)|."""
    f_s, f_t = labeling_functions(inst)
    lhs = hypothesis_error(f_s, f_t, inst.w_t)
    rhs = (1.0 - inst.lam) * (1.0 - exact_transition(inst).trace)
    return abs(lhs - rhs)


def exhaustive_binary(n: int) -> np.ndarray:
    """All 2^n binary functions on n points, one per row."""
    if n > MAX_EXHAUSTIVE_N:
        raise SizeError(f"exhaustive class over {n} points is too large; pass a subset")
    codes = np.arange(2**n)[:, None]
    return ((codes >> np.arange(n)) & 1).astype(np.float64)


def h_tilde_divergence(w_s, w_t, H: np.ndarray | None = None) -> float:
    """sup over f, f' ∈ H and thresholds t of |E_s[1(|f−f'|>t)] − E_t[1(|f−f'|>t)]|."""
    w_s, w_t = np.asarray(w_s, dtype=np.float64), np.asarray(w_t, dtype=np.float64)
    H = exhaustive_binary(w_s.size) if H is None else np.asarray(H, dtype=np.float64)
    diff = np.abs(H[:, None, :] - H[None, :, :]).reshape(-1, w_s.size)
    dw = w_s - w_t
    # the indicator only changes at attained gap values, so those thresholds suffice
    best = 0.0
    for t in np.unique(np.r_[0.0, diff.ravel()]):
        if t > 1.0:
            break
        best = max(best, float(np.abs((diff > t) @ dw).max()))
    return best


def _contains(H: np.ndarray, g: np.ndarray) -> bool:
    return bool(np.any(np.all(np.abs(H - g) <= TOL, axis=1)))


def default_class(inst: FiniteInstance) -> np.ndarray:
    """Exhaustive binary class augmented with f and f_S so the lemma applies."""
    f_s, _ = labeling_functions(inst)
    return np.unique(np.vstack([exhaustive_binary(inst.n), inst.f, f_s]), axis=0)


def verify_bound_chain(inst: FiniteInstance, H: np.ndarray | None = None) -> BoundReport:
    H = default_class(inst) if H is None else np.asarray(H, dtype=np.float64)
    f_s, f_t = labeling_functions(inst)
    contract_ok = _contains(H, inst.f) and _contains(H, f_s)

    eps_t_f = hypothesis_error(inst.f, f_t, inst.w_t)
    eps_t_f_fs = hypothesis_error(inst.f, f_s, inst.w_t)
    eps_s_f_fs = hypothesis_error(inst.f, f_s, inst.w_s)
    eps_t_fs_ft = hypothesis_error(f_s, f_t, inst.w_t)
    d = h_tilde_divergence(inst.w_s, inst.w_t, H)
    residual = disagreement_identity_check(inst) if inst.binary else float("nan")
    disagreement = (1.0 - inst.lam) * (1.0 - exact_transition(inst).trace) if inst.binary else eps_t_fs_ft

    line1 = eps_t_f_fs + eps_t_fs_ft
    line2 = eps_s_f_fs - eps_s_f_fs + eps_t_f_fs + eps_t_fs_ft
    line3 = eps_s_f_fs + abs(eps_t_f_fs - eps_s_f_fs) + eps_t_fs_ft
    line4 = eps_s_f_fs + d + eps_t_fs_ft
    rhs = eps_s_f_fs + d + disagreement
    steps = (
        eps_t_f <= line1 + TOL,                                  # triangle inequality
        abs(line2 - line1) <= TOL,                               # add and subtract
        line2 <= line3 + TOL,                                    # |a| >= a
        line3 <= line4 + TOL,                                    # divergence lemma
        abs(line4 - rhs) <= TOL,                                 # disagreement identity
    )
    holds = eps_t_f <= rhs + TOL
    return BoundReport(eps_t_f, eps_s_f_fs, d, disagreement, eps_t_f, rhs, bool(holds),
                       rhs - eps_t_f, eps_s_f_fs + 0.5 * d + disagreement - eps_t_f,
                       residual, steps, contract_ok)


def random_instance(rng: np.random.Generator, n: int) -> FiniteInstance:
    def weights():
        w = rng.dirichlet(np.full(n, 0.7))
        if n > 1 and rng.random() < 0.2:
            w[rng.random(n) < 0.4] = 0.0
            if w.sum() == 0:
                w[rng.integers(n)] = 1.0
        return w / w.sum()

    def bits():
        return rng.integers(0, 2, size=n).astype(np.float64)

    lam = float(rng.choice([0.0, 1.0])) if rng.random() < 0.1 else float(rng.random())
    f = bits() if rng.random() < 0.7 else rng.random(n)
    return FiniteInstance(weights(), weights(), bits(), bits(), bits(), lam, f)


REPORT_HEADER = ("instance", "n", "eps_t_f", "eps_s_f_fs", "d_htilde", "disagreement_term",
                 "lhs", "rhs", "holds", "slack", "slack_half", "identity_residual", "contract_ok")


def campaign(n_instances: int, max_n: int = 6, seed: int = 0):
    """Yield (instance, report) for random instances with 1 <= n <= max_n."""
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        inst = random_instance(rng, int(rng.integers(1, max_n + 1)))
        yield inst, verify_bound_chain(inst)


def run_campaign(n_instances: int, max_n: int, seed: int, csv_path=None,
                 counterexample_dir=None) -> dict:
    """Run a campaign, optionally writing the report CSV; returns summary counts."""
    summary = {"instances": 0, "holds": 0, "min_slack": float("inf"),
               "max_identity_residual": 0.0, "steps_ok": 0, "contract_ok": 0}
    fh = open(csv_path, "w", newline="", encoding="utf-8") if csv_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(REPORT_HEADER)
    try:
        for i, (inst, rep) in enumerate(campaign(n_instances, max_n, seed)):
            summary["instances"] += 1
            summary["holds"] += rep.holds
            summary["steps_ok"] += all(rep.steps_ok)
            summary["contract_ok"] += rep.contract_ok
            summary["min_slack"] = min(summary["min_slack"], rep.slack)
            summary["max_identity_residual"] = max(summary["max_identity_residual"], rep.identity_residual)
            if writer:
                writer.writerow([i, inst.n] + [f"{v:.9g}" for v in (
                    rep.eps_t_f, rep.eps_s_f_fs, rep.d_htilde, rep.disagreement_term, rep.lhs,
                    rep.rhs)] + [int(rep.holds), f"{rep.slack:.9g}", f"{rep.slack_half:.9g}",
                                 f"{rep.identity_residual:.3g}", int(rep.contract_ok)])
            if counterexample_dir and not (rep.holds and all(rep.steps_ok)):
                out = Path(counterexample_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"counterexample_{seed}_{i}.json").write_text(inst.to_json())
    finally:
        if fh:
            fh.close()
    return summary


def summary_line(summary: dict) -> str:
    slack = summary["min_slack"]
    slack_txt = "nan" if slack == float("inf") else f"{slack:.9g}"
    return f"instances={summary['instances']} holds={summary['holds']} min_slack={slack_txt}"
