"""Efficient non-local self-attention via positive random features.

The exponential kernel exp(q.k) is replaced by an inner product of random
feature maps:

    sigma(x)_j = m^(-1/2) * exp(phi_j . x - ||x||^2 / 2 - s),      phi_j ~ N(0, I_c)

where s is a single stabilization shift shared by the whole call (the max of
the exponent over all rows and features).  E[sigma(q).sigma(k)] * e^(2s) equals
exp(q.k) exactly, and s cancels in the normalized attention output.

``enlsa_attention`` computes D^-1 sigma(Q') (sigma(K')^T V) in that association
order, never materializing an N x N matrix, so cost is linear in token count.
``exact_attention`` is the quadratic softmax oracle it approximates.

A "literal" feature form exp(-||x - phi||^2 / 2) is also exposed; it differs
from the unbiased form by a per-feature factor exp(-||phi_j||^2 / 2) that does
not cancel across features, so its kernel estimate is biased.  It exists for
comparison only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ops
from .autodiff import Parameter, Rng, Var, derive_seed
from .errors import GuardError, NumericError, ShapeError

EXACT_ATTENTION_TOKEN_GUARD = 8192

FEATURE_FORMS = ("unbiased", "literal")


@dataclass
class FeatureBank:
    """Frozen random projection matrix phi, (m, c) iid standard normal."""

    phi: np.ndarray
    m: int
    c: int
    seed: int

    @classmethod
    def create(cls, c: int, m: int, seed: int) -> "FeatureBank":
        if m < 1 or c < 1:
            raise ShapeError(f"FeatureBank: need m >= 1 and c >= 1, got m={m}, c={c}")
        phi = Rng(seed).normal((m, c))
        return cls(phi=phi, m=m, c=c, seed=seed)

    def regenerate(self) -> "FeatureBank":
        return FeatureBank.create(self.c, self.m, self.seed)


@dataclass
class EnlsaParams:
    """Square q/k/v projections plus the feature bank.

    ``scale`` is applied to Q and K before feature mapping (default c^-1/4 on
    each, i.e. the usual 1/sqrt(c) softmax temperature on the product).
    ``eps_denominator`` guards rows whose features all underflow; it is
    applied relative to the largest denominator entry so that the
    stabilization shift cancels exactly.
    """

    wq: Parameter
    bq: Parameter
    wk: Parameter
    bk: Parameter
    wv: Parameter
    bv: Parameter
    bank: FeatureBank
    scale: float
    eps_denominator: float = 1e-6
    normalize: bool = True
    feature_form: str = "unbiased"

    @property
    def c(self) -> int:
        return self.wq.value.shape[0]

    def parameters(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv]


def init_enlsa(
    rng: Rng,
    c: int,
    m: int,
    prefix: str,
    scale: float | None = None,
    eps_denominator: float = 1e-6,
    normalize: bool = True,
    qk_std: float = 0.5,
    feature_form: str = "unbiased",
) -> EnlsaParams:
    """Seeded parameter init.

    Q/K projections are drawn at std qk_std/sqrt(c) (default 0.5/sqrt(c)),
    which keeps ||scale*Q + scale*K||^2 small enough that the random-feature
    estimator starts in its low-variance regime; V uses plain 1/sqrt(c).
    """
    if feature_form not in FEATURE_FORMS:
        raise ShapeError(f"feature_form must be one of {FEATURE_FORMS}, got {feature_form!r}")
    d = 1.0 / math.sqrt(c)
    return EnlsaParams(
        wq=Parameter(f"{prefix}.wq", rng.normal((c, c), std=qk_std * d)),
        bq=Parameter(f"{prefix}.bq", np.zeros(c)),
        wk=Parameter(f"{prefix}.wk", rng.normal((c, c), std=qk_std * d)),
        bk=Parameter(f"{prefix}.bk", np.zeros(c)),
        wv=Parameter(f"{prefix}.wv", rng.normal((c, c), std=d)),
        bv=Parameter(f"{prefix}.bv", np.zeros(c)),
        bank=FeatureBank.create(c, m, derive_seed(rng.seed, f"{prefix}.bank")),
        scale=c ** -0.25 if scale is None else scale,
        eps_denominator=eps_denominator,
        normalize=normalize,
        feature_form=feature_form,
    )


class FeatureMapResult(NamedTuple):
    features: object  # (N, m) Var or ndarray, all entries positive
    shift: float  # stabilization shift s; de-shift kernel estimates with e^(2s)


def feature_map(x, bank: FeatureBank, form: str = "unbiased") -> FeatureMapResult:
    """Map tokens (N, c) to positive random features (N, m).

    The returned shift s is max(phi_j . x_i - ||x_i||^2 / 2) over the whole
    call; features are exp(that - s) / sqrt(m), so the largest feature is
    exactly m^-1/2 and nothing overflows.  Kernel estimates de-shift as
    sigma(q) . sigma(k) * exp(s_q + s_k).
    """
    if form not in FEATURE_FORMS:
        raise ShapeError(f"feature_map: unknown form {form!r}")
    xv = x.value if isinstance(x, Var) else x
    if xv.ndim != 2:
        raise ShapeError(f"feature_map: expected (N, c) tokens, got {xv.shape}")
    if xv.shape[1] != bank.c:
        raise ShapeError(
            f"feature_map: token dim (axis 1) = {xv.shape[1]} but bank expects c = {bank.c}"
        )
    sq_half = ops.scale(ops.sum_axis(ops.mul(x, x), 1), 0.5)  # (N,)
    z = ops.sub(ops.matmul(x, bank.phi.T), ops.expand_cols(sq_half, bank.m))
    if form == "literal":
        # exp(-||x - phi||^2 / 2) carries an extra -||phi_j||^2 / 2 per feature
        phi_half = 0.5 * (bank.phi.astype(np.float64) ** 2).sum(axis=1)
        z = ops.sub(z, ops.expand_rows(phi_half.astype(xv.dtype), xv.shape[0]))
    zv = z.value if isinstance(z, Var) else z
    shift = float(zv.max()) if zv.size else 0.0
    feats = ops.scale(ops.exp(ops.scale(z, 1.0, -shift)), 1.0 / math.sqrt(bank.m))
    return FeatureMapResult(feats, shift)


def _stage_check(v, stage: str):
    arr = v.value if isinstance(v, Var) else v
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"enlsa_attention: non-finite value at stage '{stage}'")
    return v


def project_qkv(tokens, params: EnlsaParams, tape=None):
    """Scaled query/key and value projections shared by both attention paths."""
    bind = (lambda p: tape.param(p)) if tape is not None else (lambda p: p.value)
    q = ops.scale(ops.linear(tokens, bind(params.wq), bind(params.bq)), params.scale)
    k = ops.scale(ops.linear(tokens, bind(params.wk), bind(params.bk)), params.scale)
    v = ops.linear(tokens, bind(params.wv), bind(params.bv))
    return q, k, v


def enlsa_attention(tokens, params: EnlsaParams, tape=None):
    """Linear-cost attention: D^-1 sigma(Q') (sigma(K')^T V).

    Output rows are mixtures of V rows with non-negative weights summing to
    one (before the epsilon guard).  Cost is O(N m c): no N x N matrix is
    ever formed.
    """
    tv = tokens.value if isinstance(tokens, Var) else tokens
    if tv.ndim != 2 or tv.shape[0] < 1:
        raise ShapeError(f"enlsa_attention: expected non-empty (N, c) tokens, got {tv.shape}")
    q, k, v = project_qkv(tokens, params, tape)
    _stage_check(q, "q-projection")
    _stage_check(k, "k-projection")
    sig_q, _ = feature_map(q, params.bank, params.feature_form)
    sig_k, _ = feature_map(k, params.bank, params.feature_form)
    _stage_check(sig_q, "sigma(Q)")
    _stage_check(sig_k, "sigma(K)")

    kv = ops.matmul(ops.transpose(sig_k), v)  # (m, c)
    num = ops.matmul(sig_q, kv)  # (N, c)
    _stage_check(num, "sigma(Q) (sigma(K)^T V)")
    if not params.normalize:
        return num

    ksum = ops.sum_axis(sig_k, 0)  # (m,)
    den = ops.reshape(ops.matmul(sig_q, ops.reshape(ksum, (params.bank.m, 1))), (tv.shape[0],))
    den_v = den.value if isinstance(den, Var) else den
    floor = params.eps_denominator * (float(den_v.max()) if den_v.max() > 0 else 1.0)
    out = ops.div(num, ops.expand_cols(ops.scale(den, 1.0, floor), tv.shape[1]))
    return _stage_check(out, "normalization")


def softmax_attention(q, k, v):
    """Plain softmax(q k^T) v on explicit q/k/v matrices (the oracle core)."""
    scores = ops.matmul(q, ops.transpose(k))
    return ops.matmul(ops.softmax_lastdim(scores), v)


def exact_attention(tokens, params: EnlsaParams, tape=None):
    """Quadratic softmax-normalized exp(Q' K'^T) V; the reference oracle."""
    tv = tokens.value if isinstance(tokens, Var) else tokens
    if tv.ndim != 2:
        raise ShapeError(f"exact_attention: expected (N, c) tokens, got {tv.shape}")
    n = tv.shape[0]
    if n > EXACT_ATTENTION_TOKEN_GUARD:
        raise GuardError(
            f"exact_attention: N = {n} exceeds the N x N materialization guard "
            f"({EXACT_ATTENTION_TOKEN_GUARD}); use enlsa_attention"
        )
    q, k, v = project_qkv(tokens, params, tape)
    return softmax_attention(q, k, v)


# ---------------------------------------------------------------------------
# verification harnesses


def kernel_estimate(q_row, k_row, bank: FeatureBank, form: str = "unbiased") -> float:
    """De-shifted random-feature estimate of exp(q . k) for single tokens."""
    fq, sq = feature_map(np.asarray(q_row, dtype=np.float32).reshape(1, -1), bank, form)
    fk, sk = feature_map(np.asarray(k_row, dtype=np.float32).reshape(1, -1), bank, form)
    return float(fq @ fk.T) * math.exp(sq + sk)


def estimator_error_curve(
    c: int,
    m_list,
    trials: int,
    seed: int,
    input_std: float = 0.25,
):
    """Median relative error of the kernel estimate vs exp(q . k), per m.

    Per trial a fresh (q, k) pair (entries N(0, input_std^2)) and a fresh
    seeded bank per m are drawn; pairs are shared across the m values so the
    m-comparison is paired.  Returns [(m, median_rel_err), ...].
    """
    pairs = []
    for t in range(trials):
        rng = Rng(derive_seed(seed, f"pair-{t}"))
        pairs.append((rng.normal(c, std=input_std), rng.normal(c, std=input_std)))
    rows = []
    for m in m_list:
        errs = np.empty(trials, dtype=np.float64)
        for t, (q, k) in enumerate(pairs):
            bank = FeatureBank.create(c, m, derive_seed(seed, f"bank-m{m}-t{t}"))
            est = kernel_estimate(q, k, bank)
            truth = math.exp(float(np.float64(q) @ np.float64(k)))
            errs[t] = abs(est - truth) / truth
        rows.append((m, float(np.median(errs))))
    return rows


def error_curve_csv(rows) -> str:
    lines = ["m,median_rel_err"]
    lines += [f"{m},{err:.9g}" for m, err in rows]
    return "\n".join(lines) + "\n"


def scaling_benchmark(c: int, m: int, n_list, repeats: int = 5, seed: int = 0):
    """Median wall time of enlsa vs exact attention per token count.

    Returns [(n, enlsa_seconds, exact_seconds), ...].  Finite checks are
    disabled during timing so both paths run their pure numpy kernels.
    """
    if repeats < 1:
        raise ShapeError(f"scaling_benchmark: repeats must be >= 1, got {repeats}")
    params = init_enlsa(Rng(derive_seed(seed, "bench-params")), c, m, prefix="bench")
    rows = []
    prev = ops.set_finite_checks(False)
    try:
        for n in n_list:
            tokens = Rng(derive_seed(seed, f"bench-tokens-{n}")).normal((n, c))
            enlsa_attention(tokens, params)  # warmup
            exact_attention(tokens, params)
            t_lin = _median_time(lambda: enlsa_attention(tokens, params), repeats)
            t_exact = _median_time(lambda: exact_attention(tokens, params), repeats)
            rows.append((n, t_lin, t_exact))
    finally:
        ops.set_finite_checks(prev)
    return rows


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def scaling_csv(rows) -> str:
    lines = ["n,enlsa_seconds,exact_seconds"]
    lines += [f"{n},{a:.9g},{b:.9g}" for n, a, b in rows]
    return "\n".join(lines) + "\n"
