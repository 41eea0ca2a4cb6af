import dataclasses
import hashlib
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from redlab.synthgen import (HiddenLabelsMissing, ParseError, SynthSpec, cyclic, generate,
                             load_dataset, load_hidden_labels, oracle_transition, save_dataset)


def second_oracle(spec: SynthSpec, n: int, seed: int) -> np.ndarray:
    """Independent Monte Carlo of the Bayes environmental label pair on target draws."""
    from redlab.synthgen import class_means

    _, mu_e = class_means(spec)
    rng = np.random.default_rng(10_000 + seed)
    C = spec.C
    pi = np.array(spec.pi)
    y = rng.integers(0, C, size=n)
    comp = np.empty(n, dtype=int)
    for i in range(n):
        if rng.random() < spec.rho_t:
            comp[i] = pi[y[i]]
        else:
            comp[i] = rng.choice([k for k in range(C) if k != pi[y[i]]])
    e = mu_e[comp] + spec.sigma * rng.standard_normal((n, spec.d_e))
    log_comp = -((e[:, None, :] - mu_e[None]) ** 2).sum(-1) / (2 * spec.sigma**2)

    def bayes(assoc, rho):
        w = np.full((C, C), (1 - rho) / (C - 1))
        w[np.arange(C), assoc] = rho
        scores = np.stack([logsumexp(log_comp + np.log(w[k]), axis=1) for k in range(C)], axis=1)
        return scores.argmax(axis=1)

    m = np.zeros((C, C))
    np.add.at(m, (bayes(np.arange(C), spec.rho_s), bayes(pi, spec.rho_t)), 1)
    return m / n


def test_default_spec_values():
    s = SynthSpec()
    assert (s.C, s.d_c, s.d_e, s.d_n, s.rho_s, s.rho_t, s.sigma, s.mu_scale) == (4, 4, 4, 8, 0.9, 0.9, 0.5, 2.0)
    assert s.pi == cyclic(4) == (1, 2, 3, 0)


def test_invalid_permutation_names_field():
    with pytest.raises(ValueError, match="pi"):
        SynthSpec(pi=(0, 0, 1, 2))
    with pytest.raises(ValueError, match="rho_t"):
        SynthSpec(rho_t=1.5)


def test_default_oracle_matches_independent_monte_carlo():
    spec = SynthSpec()
    n = 100_000
    a = oracle_transition(spec, n_mc=n).m
    b = second_oracle(spec, n, 0)
    se = np.sqrt(a * (1 - a) / n + b * (1 - b) / n)
    assert np.all(np.abs(a - b) <= 3 * se + 1e-12)
    # a fixed-point-free permutation never lets the two Bayes labels coincide
    assert np.trace(a) == 0.0 and np.trace(b) == 0.0


def test_identity_vs_derangement_limits():
    ident = SynthSpec(pi=(0, 1, 2, 3), rho_s=1.0, rho_t=1.0, sigma=1e-3)
    der = dataclasses.replace(ident, pi=cyclic(4))
    assert oracle_transition(ident, 20_000).trace == pytest.approx(1.0)
    assert oracle_transition(der, 20_000).trace == pytest.approx(0.0)


def test_no_shift_case_is_diagonal_dominant():
    spec = SynthSpec(pi=(0, 1, 2, 3))
    tm = oracle_transition(spec, 20_000)
    assert tm.trace == pytest.approx(1.0)
    tm.check()


def test_disagreement_monotone_in_displacement():
    n = 20_000
    t_id = oracle_transition(SynthSpec(pi=(0, 1, 2, 3)), n).trace
    t_der = oracle_transition(SynthSpec(), n).trace
    se = np.sqrt(t_id * (1 - t_id) / n + t_der * (1 - t_der) / n)
    assert t_id >= t_der - 3 * se


def test_oracle_needs_enough_draws():
    with pytest.raises(ValueError):
        oracle_transition(SynthSpec(), n_mc=100)


@pytest.mark.parametrize("seed", range(3))
def test_causal_block_domain_invariant_and_balanced(seed):
    spec = SynthSpec(seed=seed)
    src, tgt, _ = generate(spec)
    for ds in (src, tgt):
        counts = np.bincount(ds.y, minlength=spec.C)
        assert counts.max() - counts.min() <= 1
    n_per = spec.n_s // spec.C
    bound = 4 * spec.sigma / np.sqrt(n_per)
    for k in range(spec.C):
        ms = src.x[src.y == k, :spec.d_c].mean(axis=0)
        mt = tgt.x[tgt.y == k, :spec.d_c].mean(axis=0)
        assert np.all(np.abs(ms - mt) < bound)


def test_environment_association_follows_permutation():
    spec = SynthSpec(rho_s=1.0, rho_t=1.0, sigma=0.01)
    src, tgt, info = generate(spec)
    env = slice(spec.d_c, spec.d_c + spec.d_e)
    for k in range(spec.C):
        np.testing.assert_allclose(src.x[src.y == k, env].mean(0), info.mu_e[k], atol=0.01)
        np.testing.assert_allclose(tgt.x[tgt.y == k, env].mean(0), info.mu_e[spec.pi[k]], atol=0.01)


def test_generation_is_pure_function_of_spec(tmp_path):
    digests = []
    for run in range(2):
        src, tgt, _ = generate(SynthSpec(seed=3))
        save_dataset(src, tgt, tmp_path / str(run))
        digests.append([hashlib.sha256((tmp_path / str(run) / f).read_bytes()).hexdigest()
                        for f in ("data.csv", "source_labels.csv", "labels.csv")])
    assert digests[0] == digests[1]


def test_round_trip_at_nine_digits(tmp_path):
    src, tgt, _ = generate(SynthSpec())
    save_dataset(src, tgt, tmp_path)
    s2, t2 = load_dataset(tmp_path, with_hidden_labels=True)
    np.testing.assert_allclose(s2.x, src.x, rtol=1e-8, atol=1e-300)
    np.testing.assert_array_equal(s2.y, src.y)
    np.testing.assert_array_equal(t2.y, tgt.y)
    s3, t3 = load_dataset(tmp_path)
    assert t3.y is None


def test_missing_sidecar_refuses_evaluation(tmp_path):
    src, tgt, _ = generate(SynthSpec(n_s=20, n_t=20))
    save_dataset(src, tgt, tmp_path)
    (tmp_path / "labels.csv").unlink()
    with pytest.raises(HiddenLabelsMissing):
        load_hidden_labels(tmp_path, 20)
    with pytest.raises(HiddenLabelsMissing):
        load_dataset(tmp_path, with_hidden_labels=True)


def test_malformed_rows_report_line_numbers(tmp_path):
    src, tgt, _ = generate(SynthSpec(n_s=8, n_t=8))
    save_dataset(src, tgt, tmp_path)
    lines = (tmp_path / "data.csv").read_text().splitlines()
    lines[4] = ",".join(lines[4].split(",")[:-2])
    (tmp_path / "data.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=r"data.csv:5:"):
        load_dataset(tmp_path)
    (tmp_path / "data.csv").write_text("dom,f0\n")
    with pytest.raises(ParseError, match=r":1:"):
        load_dataset(tmp_path)


def test_ten_thousand_rows_load_fast(tmp_path):
    src, tgt, _ = generate(SynthSpec(n_s=5000, n_t=5000))
    save_dataset(src, tgt, tmp_path)
    t0 = time.perf_counter()
    s2, t2 = load_dataset(tmp_path)
    assert time.perf_counter() - t0 < 1.0
    assert len(s2) + len(t2) == 10_000
