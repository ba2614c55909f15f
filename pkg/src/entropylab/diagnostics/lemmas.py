"""Executable identities for the training-dynamics analysis.

Each function computes a quantity two independent ways (or against an
explicit parameter step) and reports the discrepancy, never just the value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..env import ToolQASpec, score_batch
from ..numerics import ParamVector
from ..policy import GradientBundle, PolicySnapshot, sample_group, trajectory_gradient
from ..trainer import Group, batch_trace, rl_loss
from .enumeration import DEFAULT_GUARD, EnumeratedDistribution, enumerate_distribution


def rel_error(a, b) -> float:
    """Max elementwise |a-b| / max(|a|, |b|); exact zeros on both sides count as agreement."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    num = np.abs(a - b)
    den = np.maximum(np.abs(a), np.abs(b))
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(np.max(out, initial=0.0))


# ---------------------------------------------------------------- format gating

@dataclass
class FormatMassReport:
    p_fmt: float
    p_sem: float
    joint: float
    q_fmt_given_sem: float | None
    q_sem_given_fmt: float | None
    sem_factorization_error: float | None
    fmt_factorization_error: float | None

    @property
    def max_error(self) -> float:
        errs = [e for e in (self.sem_factorization_error, self.fmt_factorization_error) if e is not None]
        return max(errs, default=0.0)


def format_mass(dist: EnumeratedDistribution, spec: ToolQASpec) -> FormatMassReport:
    fmt, sem = score_batch(spec, dist.prompt[1], dist.tokens, dist.lengths)
    fmt, sem = fmt.astype(bool), sem.astype(bool)
    pi = dist.probs
    p_fmt, p_sem = float(pi[fmt].sum()), float(pi[sem].sum())
    joint = float(pi[fmt & sem].sum())
    q_fs = q_sf = e_s = e_f = None
    # conditionals come from renormalised restrictions, not from joint / marginal
    if p_sem > 0:
        q_fs = float(np.sum(pi[sem] / p_sem * fmt[sem]))
        e_s = rel_error(joint, p_sem * q_fs)
    if p_fmt > 0:
        q_sf = float(np.sum(pi[fmt] / p_fmt * sem[fmt]))
        e_f = rel_error(joint, p_fmt * q_sf)
    return FormatMassReport(p_fmt, p_sem, joint, q_fs, q_sf, e_s, e_f)


# ---------------------------------------------------------------- interference

@dataclass
class InterferenceReport:
    kernel: np.ndarray
    kernel_w: np.ndarray
    kernel_phi: np.ndarray
    kernel_w_pairs: np.ndarray
    kernel_phi_pairs: np.ndarray
    centralities: np.ndarray
    predicted_drift: float
    w_pair_error: float
    phi_pair_error: float
    block_error: float
    _residuals: list[np.ndarray] = field(repr=False, default_factory=list)

    def token_pair_coefficients(self, i: int, j: int) -> np.ndarray:
        """alpha[k, k'] = <q_{i,k}, q_{j,k'}>."""
        return self._residuals[i] @ self._residuals[j].T


class VersionMismatch(ValueError):
    pass


def kernel_drift(grads, advantages) -> tuple[np.ndarray, np.ndarray, float]:
    """(K, centralities c_j = mean_i K_ij, predicted drift sum_j A_j c_j) for raw gradient vectors."""
    g = np.stack([x.flatten() if isinstance(x, ParamVector) else np.ravel(x) for x in grads]).astype(np.float64)
    A = np.asarray(advantages, dtype=np.float64)
    if A.shape != (len(g),):
        raise ValueError("one advantage per gradient required")
    K = g @ g.T
    c = K.mean(axis=0)
    return K, c, float(A @ c)


def interference(bundles: list[GradientBundle], advantages) -> InterferenceReport:
    if len({b.version for b in bundles}) > 1:
        raise VersionMismatch("bundles come from different snapshot versions")
    G = len(bundles)
    A = np.asarray(advantages, dtype=np.float64)
    if A.shape != (G,):
        raise ValueError("one advantage per bundle required")
    K, c, drift = kernel_drift([b.g for b in bundles], A)
    w = np.stack([b.w_block.ravel() for b in bundles])
    phi = np.stack([b.phi_block.flatten() for b in bundles])
    KW, Kphi = w @ w.T, phi @ phi.T

    V, d = bundles[0].w_block.shape
    Q = [np.array([t.residual for t in b.diagnostics]).reshape(-1, V) for b in bundles]
    H = [np.array([t.hidden for t in b.diagnostics]).reshape(-1, d) for b in bundles]
    F = [np.stack([p.flatten() for p in b.per_token_phi]) if b.per_token_phi else np.zeros((0, phi.shape[1]))
         for b in bundles]
    KWp = np.zeros((G, G))
    Kphip = np.zeros((G, G))
    for i in range(G):
        for j in range(G):
            KWp[i, j] = np.sum((Q[i] @ Q[j].T) * (H[i] @ H[j].T))
            Kphip[i, j] = np.sum(F[i] @ F[j].T)
    return InterferenceReport(
        kernel=K, kernel_w=KW, kernel_phi=Kphi, kernel_w_pairs=KWp, kernel_phi_pairs=Kphip,
        centralities=c, predicted_drift=drift,
        w_pair_error=rel_error(KWp, KW), phi_pair_error=rel_error(Kphip, Kphi),
        block_error=rel_error(K, KW + Kphi), _residuals=Q,
    )


def group_bundles(snapshot: PolicySnapshot, group: Group) -> list[GradientBundle]:
    return [trajectory_gradient(snapshot, group.prompt, r, i) for i, r in enumerate(group.responses)]


# ---------------------------------------------------------------- likelihood drift

@dataclass
class DriftResult:
    predicted: float
    observed: float

    @property
    def residual(self) -> float:
        return self.observed - self.predicted

    def __iter__(self):
        return iter((self.predicted, self.observed, self.residual))


def mean_log_likelihood(snapshot: PolicySnapshot, group: Group) -> float:
    bt = batch_trace(snapshot, [group.prompt] * group.size, group.responses)
    return float(np.mean(bt.log_likelihood.value))


def predicted_vs_observed_drift(snapshot: PolicySnapshot, group: Group, eta: float,
                                bundles: list[GradientBundle] | None = None) -> DriftResult:
    """eta * sum_j A_j c_j against the actual change in the group's mean log-likelihood
    after one descent step of size eta on L_RL alone."""
    A = np.asarray(group.advantages, dtype=np.float64)
    if not np.any(A):
        return DriftResult(0.0, 0.0)
    if bundles is None:
        bundles = group_bundles(snapshot, group)
    rep = interference(bundles, A)
    loss, tape = rl_loss(group, snapshot)
    grad = tape.backward(loss)
    stepped = snapshot.with_params(snapshot.params - grad * eta)
    observed = mean_log_likelihood(stepped, group) - mean_log_likelihood(snapshot, group)
    return DriftResult(eta * rep.predicted_drift, observed)


def drift_order(snapshot: PolicySnapshot, group: Group, eta: float) -> tuple[float, DriftResult, DriftResult]:
    """Residual ratio under step halving; ~4 when the residual is second order."""
    bundles = group_bundles(snapshot, group)
    full = predicted_vs_observed_drift(snapshot, group, eta, bundles)
    half = predicted_vs_observed_drift(snapshot, group, eta / 2, bundles)
    ratio = full.residual / half.residual if half.residual != 0 else float("inf")
    return ratio, full, half


# ---------------------------------------------------------------- entropy

@dataclass
class EntropyReport:
    entropy: float
    covariance: float | None
    predicted_rate: float | None
    mode: str
    mean_rate: float | None = None
    normalization_error: float | None = None


def entropy_report(snapshot: PolicySnapshot, spec: ToolQASpec, prompt, update_direction: ParamVector | None = None,
                   mode: str = "exact", samples: int = 256, seed=0,
                   guard: int = DEFAULT_GUARD) -> EntropyReport:
    if mode == "exact":
        dist = enumerate_distribution(snapshot, spec, prompt, direction=update_direction, guard=guard)
        pi, lp = dist.probs, dist.log_probs
        H = float(-np.sum(pi * lp))
        if update_direction is None:
            rate = np.zeros_like(lp)
        else:
            rate = dist.log_prob_rates
        mean_lp = float(np.sum(pi * lp))
        mean_rate = float(np.sum(pi * rate))
        cov = float(np.sum(pi * (lp - mean_lp) * (rate - mean_rate)))
        return EntropyReport(H, cov, -cov, "exact", mean_rate, dist.normalization_error())
    if mode == "monte_carlo_token":
        if samples < 1:
            raise ValueError("monte_carlo_token mode needs a positive sample budget")
        seeds = [(int(seed) if np.isscalar(seed) else seed, i) for i in range(samples)]
        responses = sample_group(snapshot, prompt, seeds, 1.0, spec.max_response_len, spec.eos)
        return EntropyReport(mean_token_entropy(snapshot, prompt, responses), None, None, "monte_carlo_token")
    raise ValueError(f"unknown entropy mode {mode!r}")


def mean_token_entropy(snapshot: PolicySnapshot, prompt, responses) -> float:
    bt = batch_trace(snapshot, [prompt] * len(responses), responses)
    ents = [bt.token_entropies(i) for i in range(len(responses))]
    ents = [e for e in ents if e.size]
    return float(np.mean(np.concatenate(ents))) if ents else 0.0


def entropy_rate_check(snapshot: PolicySnapshot, spec: ToolQASpec, prompt, direction: ParamVector,
                       eta: float) -> dict:
    """Forward-difference entropy change along ``direction`` at eta and eta/2 against -Cov."""
    base = entropy_report(snapshot, spec, prompt, direction)
    out = {"entropy": base.entropy, "predicted_rate": base.predicted_rate,
           "normalization_error": base.normalization_error, "mean_rate": base.mean_rate}
    residuals = []
    for step in (eta, eta / 2):
        moved = snapshot.with_params(snapshot.params + direction.select(snapshot.params.keys()) * step)
        h = enumerate_distribution(moved, spec, prompt).entropy()
        fd = (h - base.entropy) / step
        residuals.append(fd - base.predicted_rate)
        out[f"fd_rate@{step:g}"] = fd
    out["residuals"] = residuals
    out["ratio"] = residuals[0] / residuals[1] if residuals[1] != 0 else float("inf")
    return out


# ---------------------------------------------------------------- corollary

@dataclass
class CorollaryVerdict:
    status: str                     # conclusion_holds | hypothesis_violated | counterexample
    drifts: np.ndarray
    failed: list[str]

    @property
    def hypotheses_hold(self) -> bool:
        return not self.failed


class AdvantageNotCentered(ValueError):
    pass


def corollary_check(grads, advantages, delta: float, tol: float = 1e-12) -> CorollaryVerdict:
    """Check the similarity / dominance hypotheses and, when they hold, that every
    per-trajectory drift sum_j A_j <g_i, g_j> is negative."""
    g = np.stack([x.flatten() if isinstance(x, ParamVector) else np.ravel(x) for x in grads]).astype(np.float64)
    A = np.asarray(advantages, dtype=np.float64)
    if abs(A.sum()) > tol * max(1.0, np.abs(A).sum()):
        raise AdvantageNotCentered(f"advantages sum to {A.sum():.3e}")
    K = g @ g.T
    norms = np.sqrt(np.diag(K))
    drifts = K @ A
    failed = []
    pos, neg = A > 0, A < 0
    if not pos.any() or not neg.any():
        failed.append("sign_partition")
    if np.any(A == 0):
        failed.append("sign_partition")
    if not 0 < delta <= 1:
        failed.append("delta_range")
    if not np.all(K > np.outer(norms, norms) * delta):
        failed.append("similarity")
    if pos.any() and neg.any() and not delta * norms[neg].min() > norms[pos].max():
        failed.append("negative_dominance")
    failed = sorted(set(failed))
    if failed:
        return CorollaryVerdict("hypothesis_violated", drifts, failed)
    return CorollaryVerdict("conclusion_holds" if np.all(drifts < 0) else "counterexample", drifts, [])


def sample_corollary_instance(rng: np.random.Generator, dim: int = 16, delta: float = 0.8,
                              n_pos: int | None = None, n_neg: int | None = None):
    """Random gradients and centered advantages satisfying the corollary's hypotheses."""
    n_pos = n_pos or int(rng.integers(1, 5))
    n_neg = n_neg or int(rng.integers(1, 5))
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    # pairwise cosine >= 1 - 2 sin^2(angle); keep each vector within a small cone around u
    half_angle = 0.5 * np.arccos(delta) * 0.9
    dirs = []
    for _ in range(n_pos + n_neg):
        v = rng.normal(size=dim)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        ang = rng.uniform(0, half_angle)
        dirs.append(np.cos(ang) * u + np.sin(ang) * v)
    pos_norms = rng.uniform(0.5, 1.5, n_pos)
    neg_norms = pos_norms.max() / delta * rng.uniform(1.05, 3.0, n_neg)
    grads = [d * s for d, s in zip(dirs, np.concatenate([pos_norms, neg_norms]))]
    a_pos = rng.uniform(0.1, 1.0, n_pos)
    a_neg = rng.uniform(0.1, 1.0, n_neg)
    a_neg *= a_pos.sum() / a_neg.sum()
    A = np.concatenate([a_pos, -a_neg])
    A -= A.mean()
    return grads, A
