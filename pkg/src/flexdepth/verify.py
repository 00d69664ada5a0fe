"""Self-contained verification suites: gradient checks against central
finite differences, CTC against brute-force alignment enumeration, relaxed
top-k contract properties, and mask structure. Each suite reports per-item
pass/fail so a broken rule is named, not just detected."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ctc, pruning
from .encoder import EncoderConfig, MaskableEncoder, bind_params, init_params


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""
    failures: list[str] = field(default_factory=list)


def _scalarize(op):
    return lambda t: ad.sum_(op(t))


def _grad_cases():
    """Named scalar-valued functions over a random input, one per primitive.
    All constants are drawn once, outside the closures, so repeated
    evaluations during finite differencing see the same function."""
    rng = np.random.default_rng(2024)

    def away_from_kinks(x, points=(0.0,), margin=0.05):
        for p in points:
            x = np.where(np.abs(x - p) < margin, x + 2 * margin, x)
        return x

    c34 = rng.standard_normal((3, 4))
    c25 = rng.standard_normal((2, 5))
    c43 = rng.standard_normal((4, 3))
    b3 = rng.standard_normal(3)
    ln_g = rng.standard_normal(5) + 1.5
    ln_b = rng.standard_normal(5)
    dw_w = rng.standard_normal((3, 4))
    dw_b = rng.standard_normal(4)
    cv_w = rng.standard_normal((3, 4, 5))
    cv_b = rng.standard_normal(5)
    c12 = rng.standard_normal(12)
    w5 = rng.standard_normal(5)
    w8 = rng.standard_normal(8)
    w6 = rng.standard_normal(6)

    cases = [
        ("add", _scalarize(lambda t: ad.add(t, t.tape.constant(c34))),
         rng.standard_normal((3, 4))),
        ("sub", _scalarize(lambda t: ad.sub(t.tape.constant(c34), t)),
         rng.standard_normal((3, 4))),
        ("mul", _scalarize(lambda t: ad.mul(t, t.tape.constant(c34))),
         rng.standard_normal((3, 4))),
        ("scale", _scalarize(lambda t: ad.scale(t, -2.5)),
         rng.standard_normal(6)),
        ("add_const", _scalarize(lambda t: ad.add_const(t, 1.3)),
         rng.standard_normal(6)),
        ("log", _scalarize(ad.log), rng.random(6) + 0.5),
        ("exp", _scalarize(ad.exp), rng.standard_normal(6)),
        ("abs", _scalarize(ad.abs_), away_from_kinks(rng.standard_normal(6))),
        ("maximum_const", _scalarize(lambda t: ad.maximum_const(t, 0.2)),
         away_from_kinks(rng.standard_normal(6), (0.2,))),
        ("minimum_const", _scalarize(lambda t: ad.minimum_const(t, 0.2)),
         away_from_kinks(rng.standard_normal(6), (0.2,))),
        ("sigmoid", _scalarize(ad.sigmoid), rng.standard_normal(6)),
        ("swish", _scalarize(ad.swish), rng.standard_normal(6)),
        ("relu", _scalarize(ad.relu), away_from_kinks(rng.standard_normal(6))),
        ("softmax", _scalarize(lambda t: ad.mul(ad.softmax(t),
                                                t.tape.constant(c25))),
         rng.standard_normal((2, 5))),
        ("log_softmax", _scalarize(lambda t: ad.mul(ad.log_softmax(t),
                                                    t.tape.constant(c25))),
         rng.standard_normal((2, 5))),
        ("glu", _scalarize(ad.glu), rng.standard_normal((3, 6))),
        ("matmul", _scalarize(lambda t: ad.matmul(t, t.tape.constant(c43))),
         rng.standard_normal((3, 4))),
        ("linear", _scalarize(lambda t: ad.linear(
            t, t.tape.constant(c43), t.tape.constant(b3))),
         rng.standard_normal((5, 4))),
        ("layernorm", _scalarize(lambda t: ad.layernorm(
            t, t.tape.constant(ln_g), t.tape.constant(ln_b))),
         rng.standard_normal((3, 5))),
        ("depthwise_conv1d", _scalarize(lambda t: ad.depthwise_conv1d(
            t, t.tape.constant(dw_w), t.tape.constant(dw_b))),
         rng.standard_normal((2, 6, 4))),
        ("conv1d", _scalarize(lambda t: ad.conv1d(
            t, t.tape.constant(cv_w), t.tape.constant(cv_b), 2)),
         rng.standard_normal((2, 7, 4))),
        ("transpose", _scalarize(lambda t: ad.mul(
            ad.transpose(t, (1, 0)), t.tape.constant(c43))),
         rng.standard_normal((3, 4))),
        ("reshape", _scalarize(lambda t: ad.mul(
            ad.reshape(t, (12,)), t.tape.constant(c12))),
         rng.standard_normal((3, 4))),
        ("slice", _scalarize(lambda t: ad.slice_tensor(t, (slice(0, 2),))),
         rng.standard_normal((4, 3))),
        ("concat", _scalarize(lambda t: ad.mul(
            c := ad.concat([t, ad.scale(t, 0.5)], axis=0), c)),
         rng.standard_normal((2, 3))),
        ("sum", _scalarize(lambda t: ad.exp(ad.sum_(t, axis=0))),
         rng.standard_normal((3, 4))),
        ("mean", _scalarize(lambda t: ad.exp(ad.mean(t, axis=-1))),
         rng.standard_normal((3, 4))),
        ("straight_through", lambda t: ad.sum_(ad.mul(
            pruning.relaxed_topk(t, 2, 1.0), t.tape.constant(w5))),
         rng.standard_normal(5)),
        ("ctc_loss", lambda t: ctc.ctc_loss(ad.log_softmax(t), [1, 2]),
         rng.standard_normal((5, 4))),
        ("relaxed_topk", lambda t: ad.sum_(ad.mul(
            pruning.relaxed_topk(t, 3, 0.7), t.tape.constant(w8))),
         rng.standard_normal(8)),
        ("zero_out_gate", lambda t: ad.sum_(ad.mul(
            pruning.zero_out_gate(t, pruning.ZeroOutState((1, 4), 4)),
            t.tape.constant(w6))), rng.standard_normal(6)),
    ]
    return cases


def grad_check_suite(tol: float = 1e-5) -> SuiteResult:
    failures = []
    worst = 0.0
    for name, f, x in _grad_cases():
        rep = ad.finite_difference_check(f, x, tol=tol)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append(f"{name}: rel err {rep.max_rel_err:.3g}")
    return SuiteResult("gradient-checks", not failures,
                       f"max rel err {worst:.3g} over "
                       f"{len(_grad_cases())} primitives", failures)


def encoder_gate_grad_suite(tol: float = 1e-5) -> SuiteResult:
    """Finite-difference check of d loss / d gate through the encoder."""
    cfg = EncoderConfig(blocks=2, dim=8, ff_dim=16, heads=2, conv_kernel=3,
                        subsample=2, input_dim=5, vocab_size=4)
    rng = np.random.default_rng(7)
    params = init_params(cfg, rng)
    feats = rng.standard_normal((1, 7, cfg.input_dim))
    labels = [[1, 2]]
    model = MaskableEncoder(cfg)

    def f(t):
        bound = bind_params(t.tape, params, trainable=False)
        out = model.forward(t.tape, bound, feats, np.array([7]), gate=t)
        return ctc.ctc_loss_batch(out.log_probs, out.out_lengths, labels).loss

    rep = ad.finite_difference_check(f, rng.uniform(0.2, 0.8, cfg.num_layers),
                                     tol=tol)
    detail = f"max rel err {rep.max_rel_err:.3g}"
    return SuiteResult("encoder-gate-gradient", rep.passed, detail,
                       [] if rep.passed else [detail])


def _collapse(path):
    out, prev = [], -1
    for sym in path:
        if sym != prev and sym != 0:
            out.append(sym)
        prev = sym
    return out


def brute_force_ctc_nll(logp: np.ndarray, labels: list[int]) -> float:
    T, V = logp.shape
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        if _collapse(path) == list(labels):
            total = np.logaddexp(total, sum(logp[t, path[t]]
                                            for t in range(T)))
    return -total


def ctc_oracle_suite(instances: int = 200, tol: float = 1e-9,
                     seed: int = 1234) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = []
    worst = 0.0
    for trial in range(instances):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        S = int(rng.integers(0, 4))
        labels = [int(rng.integers(1, V)) for _ in range(S)]
        logits = rng.standard_normal((T, V)) * 2.0
        shifted = logits - logits.max(-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        tape = ad.Tape(recording=False)
        got = float(ctc.ctc_loss(tape.leaf(logp), labels).values)
        want = brute_force_ctc_nll(logp, labels)
        if np.isinf(want) or np.isinf(got):
            if np.isinf(want) != np.isinf(got):
                failures.append(f"trial {trial}: {got} vs {want}")
            continue
        err = abs(got - want)
        worst = max(worst, err)
        if err >= tol:
            failures.append(f"trial {trial}: |{got} - {want}| = {err:.3g}")
    return SuiteResult("ctc-brute-force", not failures,
                       f"max abs err {worst:.3g} over {instances} instances",
                       failures)


def relaxed_topk_suite(triples: int = 1000, seed: int = 99) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(triples):
        L = int(rng.integers(2, 48))
        k = int(rng.integers(1, L + 1))
        tau = float(np.exp(rng.uniform(np.log(0.05), np.log(2.0))))
        tape = ad.Tape(recording=False)
        alpha = pruning.relaxed_topk(tape.leaf(rng.standard_normal(L)),
                                     k, tau).values
        if np.any(alpha < 0.0) or np.any(alpha > 1.0):
            failures.append(f"trial {trial}: alpha outside [0, 1]")
        if alpha.sum() - k > 1e-9:
            failures.append(f"trial {trial}: sum {alpha.sum()} exceeds k={k}")
    # low-temperature convergence with well-separated scores
    for trial in range(100):
        L = int(rng.integers(2, 20))
        s = rng.permutation(L) * 0.5
        k = int(rng.integers(1, L + 1))
        tape = ad.Tape(recording=False)
        alpha = pruning.relaxed_topk(tape.leaf(s.astype(float)), k, 0.01).values
        if np.max(np.abs(alpha - pruning.hard_topk_mask(s, k))) >= 1e-3:
            failures.append(f"low-tau trial {trial}: not within 1e-3 of hard")
    return SuiteResult("relaxed-topk-contract", not failures,
                       f"{triples} random triples + 100 low-temperature",
                       failures)


def mask_structure_suite(cases: int = 1000, seed: int = 17) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = []
    for trial in range(cases):
        L = int(rng.integers(2, 48))
        n = int(rng.integers(1, min(L, 5) + 1))
        ks = sorted(rng.choice(np.arange(1, L + 1), size=n,
                               replace=False).tolist(), reverse=True)
        s = rng.standard_normal(L)
        masks = pruning.masks_from_scores(s, pruning.SubnetSpec(tuple(ks)))
        for mask, k in zip(masks, ks):
            if int(mask.sum()) != k:
                failures.append(f"trial {trial}: cardinality {mask.sum()} != {k}")
        for big, small in zip(masks, masks[1:]):
            if np.any(small > big):
                failures.append(f"trial {trial}: masks not nested")
        k = int(rng.integers(1, L + 1))
        state = pruning.zero_out_update(s, k)
        if len(state.suppressed) != L - k:
            failures.append(f"trial {trial}: suppression size wrong")
    # directed revival: a suppressed layer's score rises above a kept one
    s = np.array([2.0, 1.0, 0.0, -1.0])
    first = pruning.zero_out_update(s, 2)
    if first.suppressed != (2, 3):
        failures.append("revival setup: unexpected suppression")
    s2 = np.array([-3.0, 1.0, 0.5, 2.0])
    second = pruning.zero_out_update(s2, 2)
    if 3 in second.suppressed or 0 not in second.suppressed:
        failures.append("revival: layer 3 did not revive")
    return SuiteResult("mask-structure", not failures,
                       f"{cases} random (s, C) cases + directed revival",
                       failures)


def run_all(fast: bool = False) -> list[SuiteResult]:
    return [
        grad_check_suite(),
        encoder_gate_grad_suite(),
        ctc_oracle_suite(instances=50 if fast else 200),
        relaxed_topk_suite(triples=200 if fast else 1000),
        mask_structure_suite(cases=200 if fast else 1000),
    ]
