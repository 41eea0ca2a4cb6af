"""Central finite-difference harness shared by the unit and acceptance suites."""

import numpy as np

from redlab import autodiff as ad
from redlab.autodiff import Tape, Tensor

FD_STEP = 1e-5


def grads_of(fn, *arrays_in):
    leaves = [Tensor(a, requires_grad=True) for a in arrays_in]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]


def central_diff(fn, *arrays_in):
    """Numerical gradient of the scalar fn w.r.t. each input, evaluated without a tape."""
    out = []
    for k, a in enumerate(arrays_in):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays_in]
            minus = [x.copy() for x in arrays_in]
            plus[k][idx] += FD_STEP
            minus[k][idx] -= FD_STEP
            f_p = fn(*[Tensor(x) for x in plus]).item()
            f_m = fn(*[Tensor(x) for x in minus]).item()
            g[idx] = (f_p - f_m) / (2 * FD_STEP)
        out.append(g)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


def away_from(rng, shape, points=(0.0,), gap=0.05):
    x = rng.standard_normal(shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.sign(x[near] - p + 1e-300) * gap * 2
    return x


def op_cases(rng):
    """(name, scalar fn, inputs) covering every differentiable op."""
    m, k, n = rng.integers(1, 5, size=3)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((m, k))
    w = rng.standard_normal((m, k))
    bm = rng.standard_normal((k, n))
    v = rng.standard_normal(k)
    sq = rng.standard_normal((k, k))
    idx = rng.integers(0, m, size=m + 2)

    def weighted(t, weight):
        return ad.tsum(ad.mul(t, Tensor(weight)))

    return [
        ("add", lambda x, y: weighted(ad.add(x, y), w), (a, b)),
        ("sub", lambda x, y: weighted(ad.sub(x, y), w), (a, b)),
        ("mul", lambda x, y: weighted(ad.mul(x, y), w), (a, b)),
        ("scalar_mul", lambda x, c: weighted(ad.mul(c, x), w), (a, np.array(1.3))),
        ("scale", lambda x, c: weighted(ad.scale(x, c), w), (a, np.array(-0.7))),
        ("matmul", lambda x, y: weighted(ad.matmul(x, y), rng_fixed((m, n))), (a, bm)),
        ("add_bias", lambda x, y: weighted(ad.add_bias(x, y), w), (a, v)),
        ("relu", lambda x: weighted(ad.relu(x), w), (away_from(rng, (m, k)),)),
        ("sigmoid", lambda x: weighted(ad.sigmoid(x), w), (3 * a,)),
        ("exp", lambda x: weighted(ad.exp(x), w), (a,)),
        ("log", lambda x: weighted(ad.log(x), w), (np.abs(a) + 0.2,)),
        ("clamp", lambda x: weighted(ad.clamp(x, -0.5, 0.5), w),
         (away_from(rng, (m, k), (-0.5, 0.5)),)),
        ("softmax_rows", lambda x: weighted(ad.softmax_rows(x), w), (2 * a,)),
        ("outer", lambda p, q: weighted(ad.outer(p, q), rng_fixed((k, k))), (v, v[::-1].copy())),
        ("batch_outer", lambda x, y: weighted(ad.batch_outer(x, y), rng_fixed((m, k * k))), (a, b)),
        ("transpose", lambda x: weighted(ad.transpose(x), w.T.copy()), (a,)),
        ("trace", lambda x: ad.trace(ad.mul(x, x)), (sq,)),
        ("rows_dot", lambda x, y: weighted(ad.rows_dot(x, y), rng_fixed((m,))), (a, b)),
        ("sum_axis0", lambda x: weighted(ad.tsum(x, 0), rng_fixed((k,))), (a,)),
        ("sum_axis1", lambda x: weighted(ad.tsum(x, 1), rng_fixed((m,))), (a,)),
        ("mean", lambda x: ad.mean(ad.mul(x, x)), (a,)),
        ("mean_axis1", lambda x: weighted(ad.mean(x, 1), rng_fixed((m,))), (a,)),
        ("take_rows", lambda x: weighted(ad.take_rows(x, idx), rng_fixed((idx.size, k))), (a,)),
        ("concat_rows", lambda x, y: weighted(ad.concat_rows(x, y), rng_fixed((2 * m, k))), (a, b)),
        ("flatten", lambda x: weighted(ad.flatten(x), rng_fixed((m * k,))), (a,)),
        ("cross_entropy", lambda x: ad.cross_entropy(ad.softmax_rows(x), rng_labels(m, k)), (a,)),
    ]


# weights that depend only on shape keep each case a pure function of its inputs
def rng_fixed(shape):
    return np.random.default_rng(abs(hash(shape)) % 2**32).standard_normal(shape)


def rng_labels(m, k):
    return np.random.default_rng(m * 31 + k).integers(0, k, size=m)


def check_seed(seed: int, tol: float = 1e-4) -> list[str]:
    """Names of ops whose gradient disagrees with central differences for this seed."""
    bad = []
    for name, fn, inputs in op_cases(np.random.default_rng(seed)):
        inputs = [np.array(x, dtype=np.float64) for x in inputs]
        for g_a, g_n in zip(grads_of(fn, *inputs), central_diff(fn, *inputs)):
            if not rel_err(g_a, g_n) < tol:
                bad.append(name)
    return bad
