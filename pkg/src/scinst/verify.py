"""Embedded oracle suite behind ``scinst verify``.

Each check returns a ``CheckResult`` with the tolerance it was held to and
the error it measured. ``epsilon`` is threaded into every normalization so a
misconfigured value (for example 0) shows up as failing checks.
"""
from __future__ import annotations

import inspect
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import torch

from . import oracles
from .contrastive import DEFAULT_TAU, icl_loss, icl_loss_from_codes
from .extractors import LAYER_NAMES, PEStage, PerceptionEncoder, PerceptualExtractor
from .generator import CrossAttentionFusion
from .gradcheck import check_gradient
from .losses import (
    LossWeights,
    content_loss,
    identity_loss,
    identity_loss_from_features,
    style_loss,
    total_loss,
)
from .scin import (
    DEFAULT_EPS,
    SCIN,
    AffineParams,
    StyleTransformer,
    adain,
    instance_norm,
    instance_stats,
    realign,
    scin_apply,
    style_encode,
)


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


def _result(name, tolerance, error, passed=None, detail=""):
    if passed is None:
        passed = math.isfinite(error) and error <= tolerance
    return CheckResult(name, tolerance, float(error), bool(passed), detail=detail)


def _max_abs(a, b) -> float:
    a, b = (v.detach() if torch.is_tensor(v) else v for v in (a, b))
    d = (torch.as_tensor(a, dtype=torch.float64) - torch.as_tensor(b, dtype=torch.float64)).abs()
    if not torch.isfinite(d).all():
        return math.inf
    return float(d.max()) if d.numel() else 0.0


# -- moments and normalization ---------------------------------------------------

def check_adain_moments(epsilon=DEFAULT_EPS, seed=0, pairs=100) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(pairs):
        n, c = (int(v) for v in torch.randint(1, 4, (2,), generator=g))
        hc, wc, hs, ws = (int(v) for v in torch.randint(2, 17, (4,), generator=g))
        f_c = torch.randn(n, c, hc, wc, generator=g, dtype=torch.float64) * 2 + 1
        scale = torch.rand(n, c, 1, 1, generator=g, dtype=torch.float64) * 3 + 0.5
        f_s = torch.randn(n, c, hs, ws, generator=g, dtype=torch.float64) * scale - 2
        out = instance_stats(adain(f_c, f_s, epsilon), epsilon)
        ref = instance_stats(f_s, epsilon)
        worst = max(worst, _max_abs(out.mu, ref.mu), _max_abs(out.sigma, ref.sigma))
    return _result("adain_moments", 1e-4, worst, detail=f"{pairs} random pairs")


def check_two_pass_stats(epsilon=DEFAULT_EPS, seed=1) -> CheckResult:
    x = torch.randn(2, 3, 5, 4, generator=torch.Generator().manual_seed(seed), dtype=torch.float64) * 3 + 7
    st = instance_stats(x, epsilon)
    mus, sigmas = oracles.naive_instance_stats(x, epsilon)
    err = max(_max_abs(st.mu.view(2, 3), mus), _max_abs(st.sigma.view(2, 3), sigmas))
    return _result("instance_stats_two_pass", 1e-12, err)


def check_sigma_positive(epsilon=DEFAULT_EPS) -> CheckResult:
    """A constant plane has zero variance; only epsilon keeps sigma positive."""
    sigma = instance_stats(torch.full((1, 2, 4, 4), 3.0, dtype=torch.float64), epsilon).sigma
    smallest = float(sigma.min())
    # error is how far sigma falls short of sqrt(1e-12); tolerance 0
    shortfall = max(0.0, 1e-6 - smallest)
    return _result("sigma_positivity", 0.0, shortfall, passed=smallest > 0 and math.isfinite(smallest),
                   detail=f"min sigma {smallest:.3g}")


def check_instance_norm_mean(epsilon=DEFAULT_EPS, seed=2) -> CheckResult:
    x = torch.randn(3, 4, 9, 7, generator=torch.Generator().manual_seed(seed)) * 5 + 3
    mean = instance_norm(x, epsilon).mean(dim=(2, 3))
    return _result("instance_norm_zero_mean", 1e-5, float(mean.abs().max()))


def check_scin_neutral(epsilon=DEFAULT_EPS, seed=3) -> CheckResult:
    x = torch.randn(2, 5, 6, 6, generator=torch.Generator().manual_seed(seed))
    ones, zeros = torch.ones(2, 5, 1, 1), torch.zeros(2, 5, 1, 1)
    err = _max_abs(scin_apply(x, AffineParams(ones, zeros), epsilon), instance_norm(x, epsilon))
    return _result("scin_neutral_exact", 0.0, err)


def check_scin_adain(epsilon=DEFAULT_EPS, seed=4) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(20):
        f_c = torch.randn(2, 4, 6, 5, generator=g, dtype=torch.float64)
        f_s = torch.randn(2, 4, 7, 3, generator=g, dtype=torch.float64) * 2.5 + 1
        st = instance_stats(f_s, epsilon)
        worst = max(worst, _max_abs(scin_apply(f_c, AffineParams(st.sigma, st.mu), epsilon),
                                    adain(f_c, f_s, epsilon)))
    return _result("scin_equals_adain", 1e-6, worst)


def check_realign_neutral(epsilon=DEFAULT_EPS, seed=5) -> CheckResult:
    torch.manual_seed(seed)
    scin = SCIN(dim=16, heads=2, patch=2, base_grid=4, channels=(6, 6, 6, 6), epsilon=epsilon)
    f = torch.randn(2, 6, 5, 5)
    style = torch.rand(2, 3, 8, 8)
    return _result("realign_neutral_at_init", 0.0, _max_abs(realign(f, style, 2, scin), instance_norm(f, epsilon)))


# -- attention -------------------------------------------------------------------

def check_style_encode_oracle(seed=6) -> List[CheckResult]:
    torch.manual_seed(seed)
    block = StyleTransformer(dim=8, heads=2).double()
    tokens = torch.randn(1, 4, 8, dtype=torch.float64)
    fast = style_encode(tokens, block)
    _, weights = block.attention_block(tokens, return_weights=True)
    slow, slow_w = oracles.naive_style_encode(tokens[0], block)
    return [
        _result("style_encode_oracle", 1e-5, max(_max_abs(fast[0], slow), _max_abs(weights[0], slow_w))),
        _result("style_attention_rows_sum_to_1", 1e-6, _max_abs(weights.sum(-1), 1.0)),
    ]


def check_cross_attention_oracle(epsilon=DEFAULT_EPS, seed=7) -> List[CheckResult]:
    torch.manual_seed(seed)
    fusion = CrossAttentionFusion(channels=4, epsilon=epsilon).double()
    content = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    style = torch.randn(1, 4, 2, 2, dtype=torch.float64)
    fused, weights = fusion(content, style, return_weights=True)
    slow, slow_w = oracles.naive_cross_attention(content[0], style[0], fusion)
    return [
        _result("cross_attention_oracle", 1e-5, max(_max_abs(fused[0], slow), _max_abs(weights[0], slow_w))),
        _result("cross_attention_rows_sum_to_1", 1e-6, _max_abs(weights.sum(-1), 1.0)),
    ]


# -- perception encoder ----------------------------------------------------------

def check_pe_shapes(seed=8, size=256) -> CheckResult:
    torch.manual_seed(seed)
    pe = PerceptionEncoder()
    with torch.no_grad():
        feat = pe(torch.rand(1, 3, size, size))
    want1, want2 = (1, 512, size // 4, size // 4), (1, 512, size // 8, size // 8)
    got1, got2 = tuple(feat.stage1.shape), tuple(feat.stage2.shape)
    ok = got1 == want1 and got2 == want2
    return _result("pe_shapes", 0.0, 0.0 if ok else 1.0, passed=ok, detail=f"stage1 {got1}, stage2 {got2}")


def check_pe_branch_isolation(seed=9) -> CheckResult:
    """Perturb one input slice at a time; only the matching output slice may move."""
    torch.manual_seed(seed)
    stage = PEStage(channels=32, heads=2)
    C, q = 32, 8
    x = torch.randn(1, C, 8, 8)
    inputs = {"h1": slice(0, q), "h2": slice(q, 2 * q), "low": slice(2 * q, C)}
    outputs = {"low": slice(0, 2 * q), "h1": slice(2 * q, 3 * q), "h2": slice(3 * q, C)}
    leak, moved = 0.0, True
    with torch.no_grad():
        base = stage(x)
        for branch, sl in inputs.items():
            y = x.clone()
            y[:, sl] += torch.randn_like(y[:, sl])
            out = stage(y)
            for other, osl in outputs.items():
                delta = float((out[:, osl] - base[:, osl]).abs().max())
                if other == branch:
                    moved = moved and delta > 0
                else:
                    leak = max(leak, delta)
    return _result("pe_branch_isolation", 0.0, leak, passed=leak == 0.0 and moved)


# -- contrastive -----------------------------------------------------------------

def _unit_codes(n, d, g):
    return torch.nn.functional.normalize(torch.randn(n, n, d, generator=g, dtype=torch.float64), dim=-1)


def check_icl_oracle(seed=10) -> List[CheckResult]:
    g = torch.Generator().manual_seed(seed)
    worst, perm_diff = 0.0, 0.0
    for n in (2, 3):
        for _ in range(5):
            s, c = _unit_codes(n, 6, g), _unit_codes(n, 6, g)
            fast = float(icl_loss_from_codes(s, c))
            slow = oracles.brute_force_icl(s.tolist(), c.tolist(), DEFAULT_TAU)
            worst = max(worst, abs(fast - slow))
            rows, cols = torch.randperm(n, generator=g), torch.randperm(n, generator=g)
            moved = float(icl_loss_from_codes(s[rows][:, cols], c[rows][:, cols]))
            perm_diff = max(perm_diff, abs(moved - fast))
    defaults = [inspect.signature(fn).parameters["tau"].default for fn in (icl_loss, icl_loss_from_codes)]
    tau_ok = all(t == 0.3 for t in defaults) and DEFAULT_TAU == 0.3
    return [
        _result("icl_oracle", 1e-6, worst, detail="n in {2, 3}"),
        _result("icl_permutation_invariance", 0.0, perm_diff),
        _result("icl_default_tau", 0.0, 0.0 if tau_ok else 1.0, passed=tau_ok, detail=f"tau defaults {defaults}"),
    ]


# -- gradients -------------------------------------------------------------------

def _randomize_heads(scin: SCIN, g: torch.Generator):
    # fresh heads have zero output weights, which would make style gradients vanish
    with torch.no_grad():
        for head in list(scin.heads.gamma) + list(scin.heads.beta):
            head[2].weight.copy_(torch.randn(head[2].weight.shape, generator=g, dtype=head[2].weight.dtype) * 0.3)


def check_gradients(epsilon=DEFAULT_EPS, seed=11) -> List[CheckResult]:
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    reports = []

    f = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    gamma = torch.randn(1, 2, 1, 1, generator=g, dtype=torch.float64)
    beta = torch.randn(1, 2, 1, 1, generator=g, dtype=torch.float64)
    w = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    reports.append(check_gradient(lambda x, a, b: (scin_apply(x, AffineParams(a, b), epsilon) * w).sum(),
                                  [f, gamma, beta], "grad_scin_apply"))

    scin = SCIN(dim=8, heads=2, patch=2, base_grid=2, channels=(2, 2, 2, 2), epsilon=epsilon).double()
    _randomize_heads(scin, g)
    level = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    feats = torch.randn(1, 2, 2, 2, generator=g, dtype=torch.float64)
    reports.append(check_gradient(lambda x, s: (realign(x, s, 1, scin) * w).sum(), [feats, level],
                                  "grad_realign"))

    block = StyleTransformer(dim=8, heads=2).double()
    tokens = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
    probe = torch.randn(1, 4, 8, generator=g, dtype=torch.float64)
    reports.append(check_gradient(lambda z: (style_encode(z, block) * probe).sum(), [tokens], "grad_style_encode"))

    s, c = _unit_codes(2, 4, g), _unit_codes(2, 4, g)
    reports.append(check_gradient(lambda a, b: icl_loss_from_codes(a, b), [s, c], "grad_icl_loss"))

    ext = PerceptualExtractor().double()
    img = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    ref = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    reports.append(check_gradient(lambda x: style_loss(x, ref, ext), [img], "grad_style_loss"))

    return [_result(r.name, r.tolerance, r.rel_error, passed=r.passed) for r in reports]


# -- loss identities -------------------------------------------------------------

def check_loss_identities(seed=12) -> List[CheckResult]:
    torch.manual_seed(seed)
    ext = PerceptualExtractor()
    x = torch.rand(2, 3, 32, 32)
    y = torch.rand(2, 3, 32, 32)
    zero = max(float(content_loss(x, x, ext)), float(style_loss(x, x, ext)),
               float(identity_loss(lambda c, s: c, x, y, ext)))
    out = [_result("losses_zero_at_identity", 0.0, zero)]

    bundle = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, LossWeights())
    out.append(_result("total_unit_components", 1e-12, abs(float(bundle.total) - 8.3)))

    feats = {k: torch.zeros(1, 2, 2, 2) for k in LAYER_NAMES}
    shifted = dict(feats, relu3_1=torch.ones(1, 2, 2, 2))
    img = torch.zeros(1, 3, 4, 4)
    pixel_only = float(identity_loss_from_features(img + 1, img, img, img, feats, feats, feats, feats))
    feature_only = float(identity_loss_from_features(img, img, img, img, shifted, feats, feats, feats))
    w = LossWeights()
    err = max(abs(pixel_only - 50.0), abs(feature_only - 1.0),
              abs(w.identity_pixel - 50.0), abs(w.identity_feature - 1.0))
    out.append(_result("identity_weights_50_1", 1e-12, err, detail=f"pixel {pixel_only}, feature {feature_only}"))
    return out


# -- driver ----------------------------------------------------------------------

CHECKS: Dict[str, Callable[..., object]] = {
    "adain_moments": check_adain_moments,
    "two_pass_stats": check_two_pass_stats,
    "sigma_positive": check_sigma_positive,
    "instance_norm_mean": check_instance_norm_mean,
    "scin_neutral": check_scin_neutral,
    "scin_adain": check_scin_adain,
    "realign_neutral": check_realign_neutral,
    "style_encode": lambda epsilon: check_style_encode_oracle(),
    "cross_attention": check_cross_attention_oracle,
    "pe_shapes": lambda epsilon: check_pe_shapes(),
    "pe_isolation": lambda epsilon: check_pe_branch_isolation(),
    "icl": lambda epsilon: check_icl_oracle(),
    "gradients": check_gradients,
    "loss_identities": lambda epsilon: check_loss_identities(),
}


def run_checks(epsilon: float = DEFAULT_EPS, only: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for key, fn in CHECKS.items():
        if only and key not in only:
            continue
        t0 = time.perf_counter()
        try:
            got = fn(epsilon=epsilon)
        except Exception as exc:  # a crashing check is a failing check
            got = CheckResult(key, 0.0, math.inf, False, detail=f"{type(exc).__name__}: {exc}")
        elapsed = time.perf_counter() - t0
        for r in got if isinstance(got, list) else [got]:
            r.seconds = elapsed
            results.append(r)
    return results


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'result':<6}  {'tolerance':>9}  {'error':>10}  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.tolerance:>9.1e}  "
                     f"{r.error:>10.3e}  {r.detail}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
