"""Seeded sweep of every identity and order check on the enumerable micro task."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path

import numpy as np

from . import env as envlib
from .config import ExperimentConfig
from .diagnostics import (corollary_check, drift_order, entropy_rate_check,
                          enumerate_distribution, format_mass, group_bundles, interference,
                          sample_corollary_instance)
from .diagnostics.enumeration import DEFAULT_GUARD
from .numerics import finite_difference_check
from .policy import (PolicySnapshot, init_snapshot, log_likelihood, perturbed_log_likelihoods, sample_group,
                     trajectory_gradient)
from .trainer import Group, compute_advantages, rl_loss

FAULTS = ("wblock",)
ENTROPY_RATIO = (1.75, 2.25)
DRIFT_RATIO = (3.5, 4.5)

# lemma instances use a wider init than training so distributions are far from uniform
LEMMA_INIT_SCALE = 0.1


@dataclass
class CheckResult:
    name: str
    seed: int
    tolerance: str
    worst_error: float
    passed: bool
    detail: str = ""


class GuardViolation(ValueError):
    pass


def _snapshot(cfg: ExperimentConfig, seed: int, k: int = 0) -> PolicySnapshot:
    return init_snapshot(cfg.architecture(), [seed, 100 + k], LEMMA_INIT_SCALE, LEMMA_INIT_SCALE)


def _group(snapshot: PolicySnapshot, spec: envlib.ToolQASpec, prompt, size: int, seed: int) -> Group:
    rng = np.random.default_rng([seed, 7])
    responses = sample_group(snapshot, prompt, [(seed, 9, i) for i in range(size)], 1.0,
                             spec.max_response_len, spec.eos)
    episodes = [envlib.make_episode(spec, prompt, r) for r in responses]
    adv = compute_advantages([e.reward for e in episodes], "standardized")
    if not np.any(adv):
        # the identities hold for any centered weights; degenerate reward groups get random ones
        adv = compute_advantages(rng.normal(size=size), "standardized")
    return Group(list(prompt), episodes, adv)


def _corrupt(bundles, seed: int):
    rng = np.random.default_rng([seed, 13])
    b = bundles[0]
    b.w_block = b.w_block + rng.normal(0.0, 1e-3, b.w_block.shape)
    return bundles


def check_gradients(snapshot, spec, group, seed) -> CheckResult:
    prompt, response = group.prompt, group.responses[0]
    bundle = trajectory_gradient(snapshot, prompt, response)
    f = lambda p: log_likelihood(snapshot.with_params(p), prompt, response)  # noqa: E731
    rep = finite_difference_check(f, snapshot.params, grad=bundle.g,
                                  batch_f=partial(perturbed_log_likelihoods, snapshot, prompt, response))
    err = float(rep.max_rel_error)
    return CheckResult("gradient_vs_finite_differences", seed, "< 1e-6", err, bool(err < 1e-6))


def check_kernels(snapshot, group, seed, fault) -> list[CheckResult]:
    bundles = group_bundles(snapshot, group)
    if fault == "wblock":
        bundles = _corrupt(bundles, seed)
    rep = interference(bundles, group.advantages)
    closed = max(float(np.max(np.abs(b.w_block - b.w_block_closed)) / max(np.max(np.abs(b.w_block)), 1e-300))
                 for b in bundles)
    sym = float(np.max(np.abs(rep.kernel - rep.kernel.T)))
    return [
        CheckResult("w_block_token_pair_identity", seed, "< 1e-10", rep.w_pair_error, rep.w_pair_error < 1e-10),
        CheckResult("w_gradient_closed_form", seed, "< 1e-10", closed, closed < 1e-10),
        CheckResult("phi_block_token_pair_identity", seed, "< 1e-10", rep.phi_pair_error, rep.phi_pair_error < 1e-10),
        CheckResult("kernel_block_decomposition", seed, "< 1e-12", rep.block_error, rep.block_error < 1e-12),
        CheckResult("kernel_symmetry", seed, "== 0", sym, sym == 0.0),
    ]


def check_drift(snapshot, group, seed, eta) -> CheckResult:
    ratio, full, half = drift_order(snapshot, group, eta)
    lo, hi = DRIFT_RATIO
    return CheckResult("likelihood_drift_second_order", seed, f"ratio in [{lo}, {hi}]", float(ratio),
                       bool(lo <= ratio <= hi),
                       f"residuals {full.residual:.3e} / {half.residual:.3e}")


def check_entropy(snapshot, spec, group, seed, eta) -> list[CheckResult]:
    loss, tape = rl_loss(group, snapshot)
    direction = -tape.backward(loss)
    direction = direction * (1.0 / direction.norm())
    out = entropy_rate_check(snapshot, spec, group.prompt, direction, eta)
    dist = enumerate_distribution(snapshot, spec, group.prompt)
    lo, hi = ENTROPY_RATIO
    H = out["entropy"]
    bound = float(np.log(len(dist)))
    return [
        CheckResult("enumeration_normalization", seed, "< 1e-9", out["normalization_error"],
                    out["normalization_error"] < 1e-9),
        CheckResult("entropy_range", seed, "0 <= H <= ln N", max(0.0, -H, H - bound), bool(0 <= H <= bound)),
        CheckResult("entropy_rate_first_order", seed, f"ratio in [{lo}, {hi}]", float(out["ratio"]),
                    bool(lo <= out["ratio"] <= hi),
                    f"-Cov {out['predicted_rate']:.6e}, residuals {out['residuals'][0]:.3e} / {out['residuals'][1]:.3e}"),
    ]


def check_format_mass(cfg, spec, seed, count) -> CheckResult:
    worst = 0.0
    for k in range(count):
        snap = _snapshot(cfg, seed, k + 1)
        prompt = spec.prompts()[k % len(spec.prompts())]
        rep = format_mass(enumerate_distribution(snap, spec, prompt), spec)
        worst = max(worst, rep.max_error)
    return CheckResult("format_mass_factorization", seed, "< 1e-12", worst, worst < 1e-12,
                       f"{count} snapshots")


def check_corollary(seed, trials, delta) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 21])
    bad = 0
    for _ in range(trials):
        grads, A = sample_corollary_instance(rng, delta=delta)
        v = corollary_check(grads, A, delta)
        bad += v.status != "conclusion_holds"
    g = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    control = corollary_check(g, [1.0, -1.0], delta)
    return [
        CheckResult("corollary_constructions", seed, f"{trials}/{trials} hold", float(bad), bad == 0),
        CheckResult("corollary_negative_control", seed, "hypothesis_violated", 0.0 if control.status ==
                    "hypothesis_violated" else 1.0, control.status == "hypothesis_violated",
                    ",".join(control.failed)),
    ]


def check_centering(group, seed) -> CheckResult:
    s = abs(float(np.sum(group.advantages)))
    return CheckResult("advantage_centering", seed, "< 1e-12", s, s < 1e-12)


def run_suite(cfg: ExperimentConfig, fault: str | None = None, log=None) -> dict:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r} (known: {', '.join(FAULTS)})")
    spec = cfg.spec()
    V, L = spec.vocab_size, spec.max_response_len
    if V ** L > DEFAULT_GUARD:
        raise GuardViolation(f"|V|^L = {V}^{L} = {V ** L} exceeds the enumeration bound {DEFAULT_GUARD}; "
                             f"lemma checks need a micro-scale task")
    lc = cfg.lemmas
    per_seed_snapshots = max(1, -(-lc.snapshots // lc.seeds))
    per_seed_trials = max(1, -(-lc.corollary_trials // lc.seeds))
    results: list[CheckResult] = []
    t0 = time.perf_counter()
    base = cfg.train.seed
    for seed in range(base, base + lc.seeds):
        snap = _snapshot(cfg, seed)
        prompt = spec.prompts()[seed % len(spec.prompts())]
        group = _group(snap, spec, prompt, lc.group_size, seed)
        batch = [check_gradients(snap, spec, group, seed), *check_kernels(snap, group, seed, fault),
                 check_drift(snap, group, seed, lc.eta), *check_entropy(snap, spec, group, seed, lc.entropy_eta),
                 check_format_mass(cfg, spec, seed, per_seed_snapshots),
                 *check_corollary(seed, per_seed_trials, lc.corollary_delta), check_centering(group, seed)]
        results += batch
        if log:
            for r in batch:
                log(format_line(r))
    failed = sorted({r.name for r in results if not r.passed})
    return {
        "passed": not failed,
        "failed_checks": failed,
        "seeds": lc.seeds,
        "fault": fault,
        "elapsed_seconds": time.perf_counter() - t0,
        "checks": [asdict(r) for r in results],
    }


def format_line(r: CheckResult) -> str:
    mark = "PASS" if r.passed else "FAIL"
    extra = f"  ({r.detail})" if r.detail else ""
    return f"{mark}  seed={r.seed}  {r.name:<34} tol {r.tolerance:<22} worst {r.worst_error:.3e}{extra}"


def write_report(report: dict, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "lemma_report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path
