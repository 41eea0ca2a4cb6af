"""Two-domain Gaussian-cluster datasets with a causal block whose class means
are shared across domains and an environmental block whose class association
is permuted between source and target.

Feature layout per row: ``[causal (d_c) | environmental (d_e) | noise (d_n)]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import TransitionMatrix

DATA_FILE = "data.csv"
SOURCE_LABELS_FILE = "source_labels.csv"
TARGET_LABELS_FILE = "labels.csv"


class ParseError(ValueError):
    pass


class HiddenLabelsMissing(FileNotFoundError):
    pass


def cyclic(num_classes: int, shift: int = 1) -> tuple[int, ...]:
    return tuple((k + shift) % num_classes for k in range(num_classes))


@dataclass
class SynthSpec:
    C: int = 4
    d_c: int = 4
    d_e: int = 4
    d_n: int = 8
    n_s: int = 1000
    n_t: int = 1000
    rho_s: float = 0.9
    rho_t: float = 0.9
    pi: tuple = (1, 2, 3, 0)
    sigma: float = 0.5
    mu_scale: float = 2.0
    causal_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.pi = tuple(int(v) for v in self.pi)
        if self.C < 2:
            raise ValueError("C: need at least two classes")
        if sorted(self.pi) != list(range(self.C)):
            raise ValueError(f"pi: {self.pi} is not a permutation of 0..{self.C - 1}")
        for name in ("rho_s", "rho_t"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name}: must lie in [0, 1]")
        if self.d_c < 1 or self.d_e < 0 or self.d_n < 0:
            raise ValueError("d_c: need d_c >= 1 and d_e, d_n >= 0")
        if self.sigma < 0:
            raise ValueError("sigma: must be non-negative")

    @property
    def dim(self) -> int:
        return self.d_c + self.d_e + self.d_n


@dataclass
class OracleInfo:
    mu_c: np.ndarray
    mu_e: np.ndarray
    pi: tuple
    rho_s: float
    rho_t: float


@dataclass
class DomainDataset:
    x: np.ndarray
    y: np.ndarray | None
    domain: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]


def class_means(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Causal and environmental class-mean tables, a pure function of the seed.

    Means are random directions scaled to norm ``mu_scale`` (environmental)
    and ``causal_scale * mu_scale`` (causal), which makes the environmental
    block the easier shortcut on the source domain.
    """
    rng = np.random.default_rng([spec.seed, 0])

    def table(d, norm):
        if d == 0:
            return np.zeros((spec.C, 0))
        m = rng.standard_normal((spec.C, d))
        return norm * m / np.linalg.norm(m, axis=1, keepdims=True)

    mu_c = table(spec.d_c, spec.causal_scale * spec.mu_scale)
    mu_e = table(spec.d_e, spec.mu_scale)
    return mu_c, mu_e


def _env_index(rng, y, assoc: np.ndarray, rho: float, C: int) -> np.ndarray:
    base = assoc[y]
    keep = rng.random(y.size) < rho
    # uniform draw among the C-1 other components
    other = (base + rng.integers(1, C, size=y.size)) % C
    return np.where(keep, base, other)


def _balanced_labels(rng, n: int, C: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % C)


def _sample(rng, spec: SynthSpec, n: int, assoc: np.ndarray, rho: float, mu_c, mu_e):
    y = _balanced_labels(rng, n, spec.C)
    e_idx = _env_index(rng, y, assoc, rho, spec.C)
    causal = mu_c[y] + spec.sigma * rng.standard_normal((n, spec.d_c))
    env = mu_e[e_idx] + spec.sigma * rng.standard_normal((n, spec.d_e))
    noise = spec.sigma * rng.standard_normal((n, spec.d_n))
    return np.hstack([causal, env, noise]), y


def generate(spec: SynthSpec) -> tuple[DomainDataset, DomainDataset, OracleInfo]:
    mu_c, mu_e = class_means(spec)
    ident = np.arange(spec.C)
    pi = np.asarray(spec.pi)
    rng_s = np.random.default_rng([spec.seed, 1])
    rng_t = np.random.default_rng([spec.seed, 2])
    xs, ys = _sample(rng_s, spec, spec.n_s, ident, spec.rho_s, mu_c, mu_e)
    xt, yt = _sample(rng_t, spec, spec.n_t, pi, spec.rho_t, mu_c, mu_e)
    oracle = OracleInfo(mu_c, mu_e, spec.pi, spec.rho_s, spec.rho_t)
    return DomainDataset(xs, ys, "source"), DomainDataset(xt, yt, "target"), oracle


def env_log_likelihoods(e: np.ndarray, mu_e: np.ndarray, assoc: np.ndarray, rho: float,
                        sigma: float) -> np.ndarray:
    """log p(e | class k) for every k under the mixture with in-association weight rho."""
    C = mu_e.shape[0]
    sq = ((e[:, None, :] - mu_e[None, :, :]) ** 2).sum(axis=2)      # [n, component]
    comp = -sq / (2.0 * sigma**2) if sigma > 0 else np.where(sq == 0, 0.0, -np.inf)
    weights = np.full((C, C), (1.0 - rho) / (C - 1))                  # [class, component]
    weights[np.arange(C), assoc] = rho
    shift = comp.max(axis=1, keepdims=True)
    # rho = 1 zeroes some mixture weights; log(0) = -inf is the intended value
    with np.errstate(divide="ignore"):
        return np.log(np.exp(comp - shift) @ weights.T) + shift


def oracle_transition(spec: SynthSpec, n_mc: int = 100_000, seed: int | None = None) -> TransitionMatrix:
    """Monte Carlo joint of Bayes environmental labels (source vs target association) on target draws."""
    if n_mc < 10_000:
        raise ValueError("n_mc must be at least 1e4")
    mu_c, mu_e = class_means(spec)
    rng = np.random.default_rng([spec.seed if seed is None else seed, 3])
    pi = np.asarray(spec.pi)
    ident = np.arange(spec.C)
    y = rng.integers(0, spec.C, size=n_mc)
    e_idx = _env_index(rng, y, pi, spec.rho_t, spec.C)
    e = mu_e[e_idx] + spec.sigma * rng.standard_normal((n_mc, spec.d_e))
    lab_s = env_log_likelihoods(e, mu_e, ident, spec.rho_s, spec.sigma).argmax(axis=1)
    lab_t = env_log_likelihoods(e, mu_e, pi, spec.rho_t, spec.sigma).argmax(axis=1)
    m = np.zeros((spec.C, spec.C))
    np.add.at(m, (lab_s, lab_t), 1.0)
    return TransitionMatrix(m / n_mc, n_mc)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def save_dataset(source: DomainDataset, target: DomainDataset, out_dir) -> None:
    """Write ``data.csv`` (both domains), ``source_labels.csv`` and the hidden ``labels.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = source.x.shape[1]
    with open(out / DATA_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain"] + [f"f{i}" for i in range(dim)])
        for ds in (source, target):
            for row in ds.x:
                w.writerow([ds.domain] + [_fmt(v) for v in row])
    for ds, name in ((source, SOURCE_LABELS_FILE), (target, TARGET_LABELS_FILE)):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label"])
            w.writerows(enumerate(int(v) for v in ds.y))


def _read_labels(path: Path, n: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["index", "label"]:
        raise ParseError(f"{path}:1: expected header 'index,label'")
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
        try:
            idx, lab = int(row[0]), int(row[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-integer field") from None
        if not 0 <= idx < n:
            raise ParseError(f"{path}:{lineno}: index {idx} out of range")
        labels[idx] = lab
    if np.any(labels < 0):
        raise ParseError(f"{path}: missing labels for some rows")
    return labels


def load_dataset(data_dir, with_hidden_labels: bool = False) -> tuple[DomainDataset, DomainDataset]:
    """Load both domains; target labels are attached only when explicitly requested."""
    data_dir = Path(data_dir)
    path = data_dir / DATA_FILE
    rows = {"source": [], "target": []}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "domain" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
            raise ParseError(f"{path}:1: expected header 'domain,f0..f{{D-1}}'")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            if row[0] not in rows:
                raise ParseError(f"{path}:{lineno}: unknown domain {row[0]!r}")
            try:
                rows[row[0]].append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric feature") from None
    dim = width - 1
    xs = np.array(rows["source"], dtype=np.float64).reshape(-1, dim)
    xt = np.array(rows["target"], dtype=np.float64).reshape(-1, dim)
    ys = _read_labels(data_dir / SOURCE_LABELS_FILE, len(xs))
    yt = None
    if with_hidden_labels:
        yt = load_hidden_labels(data_dir, len(xt))
    return DomainDataset(xs, ys, "source"), DomainDataset(xt, yt, "target")


def load_hidden_labels(data_dir, n: int) -> np.ndarray:
    path = Path(data_dir) / TARGET_LABELS_FILE
    if not path.exists():
        raise HiddenLabelsMissing(f"{path}: hidden target labels not found; evaluation refused")
    return _read_labels(path, n)
