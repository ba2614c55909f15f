"""Run orchestration: training runs with metric logs, α comparisons and trajectory export.

A run directory holds::

    config.conf        resolved configuration
    metrics.jsonl      one record per diagnostics tick (sorted keys, absent = not computed)
    timing.jsonl       wall-clock per tick, kept apart so metrics stay reproducible
    episodes.jsonl     every training episode with its advantage and log-probabilities
    snapshots/         step_XXXXXX.policy (+ .head.npz) at checkpoints and at the end
    summary.json       final status
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import env as envlib
from .config import ExperimentConfig
from .diagnostics import (EnumerationGuardError, enumerate_distribution, format_mass, predicted_vs_observed_drift)
from .diagnostics.enumeration import DEFAULT_GUARD
from .diagnostics.metrics import degeneracy_metrics, separation_score
from .policy import PolicySnapshot, _leaves, init_snapshot, sample_group, save_snapshot
from .trainer import (Group, NonFiniteLoss, TrainState, _seal_term, batch_trace, initial_state, mid_train, rollout,
                      train_step)

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step", "reward_mean", "valid_action_ratio", "format_error_rate", "duplication_ratio",
    "hallucination_rate", "token_entropy", "trajectory_entropy", "p_fmt", "p_sem",
    "mean_ll_correct", "mean_ll_valid", "predicted_drift", "observed_drift",
    "probe_accuracy", "cosine_gap", "seal_heldout_loss", "loss_rl", "loss_seal", "loss_kl",
    "loss_total", "grad_norm",
)
EPISODE_FIELDS = ("step", "prompt", "response", "r_fmt", "r_sem", "reward", "advantage",
                  "log_likelihood", "token_log_probs")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False)


@dataclass
class HeldOut:
    prompts: list[list[int]]
    responses: list[list[int]]
    labels: np.ndarray


def sample_heldout(snapshot: PolicySnapshot, spec: envlib.ToolQASpec, cfg: ExperimentConfig,
                   max_groups: int = 64) -> HeldOut | None:
    """Fixed evaluation trajectories, drawn once per run with a dedicated seed.

    Extra groups are drawn (up to ``max_groups``) until both labels appear.
    """
    n = cfg.diagnostics.heldout_groups
    if n == 0:
        return None
    prompts, responses, labels = [], [], []
    G, seed = cfg.train.group_size, cfg.diagnostics.heldout_seed
    for g in range(max_groups):
        if g >= n and 0 < sum(labels) < len(labels):
            break
        prompt = spec.prompts()[g % len(spec.prompts())]
        rs = sample_group(snapshot, prompt, [(seed, cfg.train.seed, g, i) for i in range(G)],
                          cfg.train.temperature, spec.max_response_len, spec.eos)
        for r in rs:
            prompts.append(prompt)
            responses.append(r)
            labels.append(envlib.make_episode(spec, prompt, r).correct)
    return HeldOut(prompts, responses, np.array(labels, dtype=np.float64))


def heldout_metrics(state: TrainState, heldout: HeldOut | None) -> dict:
    if heldout is None:
        return {}
    bt = batch_trace(state.snapshot, heldout.prompts, heldout.responses)
    out = {}
    if bt.mask.any():
        leaves = _leaves(state.head)
        out["seal_heldout_loss"] = float(_seal_term(bt, leaves, heldout.labels).value)
    keep = bt.mask.any(axis=1)
    y = heldout.labels[keep]
    if 0 < y.sum() < len(y):
        vecs = np.stack([bt.hidden_rows(i).mean(axis=0) for i in np.flatnonzero(keep)])
        out["probe_accuracy"], out["cosine_gap"] = separation_score(vecs, y)
    return out


def exact_metrics(snapshot: PolicySnapshot, spec: envlib.ToolQASpec) -> dict:
    """Trajectory entropy and format masses averaged over prompts; empty when not enumerable."""
    if snapshot.arch.vocab_size ** spec.max_response_len > DEFAULT_GUARD:
        return {}
    ent, pf, ps = [], [], []
    for prompt in spec.prompts():
        try:
            dist = enumerate_distribution(snapshot, spec, prompt)
        except EnumerationGuardError:
            return {}
        ent.append(dist.entropy())
        fm = format_mass(dist, spec)
        pf.append(fm.p_fmt)
        ps.append(fm.p_sem)
    return {"trajectory_entropy": float(np.mean(ent)), "p_fmt": float(np.mean(pf)), "p_sem": float(np.mean(ps))}


def tick_metrics(state: TrainState, group: Group, spec: envlib.ToolQASpec, cfg: ExperimentConfig,
                 heldout: HeldOut | None) -> dict:
    eps = group.episodes
    deg = degeneracy_metrics(spec, eps)
    bt = batch_trace(state.snapshot, [group.prompt] * group.size, group.responses)
    ll = np.asarray(bt.log_likelihood.value)
    ents = [bt.token_entropies(i) for i in range(group.size)]
    ents = [e for e in ents if e.size]
    rec = {
        "step": state.step,
        "reward_mean": float(np.mean([e.reward for e in eps])),
        **deg.to_dict(),
    }
    if ents:
        rec["token_entropy"] = float(np.mean(np.concatenate(ents)))
    correct = [ll[i] for i, e in enumerate(eps) if e.correct]
    valid = [ll[i] for i, e in enumerate(eps) if e.r_fmt]
    if correct:
        rec["mean_ll_correct"] = float(np.mean(correct))
    if valid:
        rec["mean_ll_valid"] = float(np.mean(valid))
    if cfg.diagnostics.exact_entropy:
        rec.update(exact_metrics(state.snapshot, spec))
    if cfg.diagnostics.drift:
        d = predicted_vs_observed_drift(state.snapshot, group, cfg.train.learning_rate)
        rec["predicted_drift"], rec["observed_drift"] = d.predicted, d.observed
    if cfg.diagnostics.separation:
        rec.update(heldout_metrics(state, heldout))
    return rec


@dataclass
class RunResult:
    status: str                 # completed | aborted
    steps_completed: int
    out: Path
    message: str = ""


def _checkpoint(state: TrainState, out: Path) -> None:
    snaps = out / "snapshots"
    snaps.mkdir(exist_ok=True)
    save_snapshot(snaps / f"step_{state.step:06d}.policy", state.snapshot)
    np.savez(snaps / f"step_{state.step:06d}.head.npz", **dict(state.head))


def prepare_state(cfg: ExperimentConfig, spec: envlib.ToolQASpec) -> TrainState:
    seed = cfg.train.seed
    snap = init_snapshot(cfg.architecture(), [seed, 0], cfg.policy.init_scale, cfg.policy.output_scale)
    if cfg.midtrain.enabled and cfg.midtrain.epochs > 0:
        demos = envlib.demonstrations(spec, cfg.midtrain.demos, [seed, 1])
        snap = mid_train(snap, demos, cfg.midtrain.epochs, cfg.midtrain.learning_rate)
        snap = replace(snap, version=0)
    return initial_state(snap, [seed, 2])


def _fault_step(fault: str | None) -> int | None:
    if fault and fault.startswith("nonfinite@"):
        return int(fault.split("@", 1)[1])
    return None


def train(cfg: ExperimentConfig, out=None, fault: str | None = None) -> RunResult:
    out = Path(out or cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.spec()
    (out / "config.conf").write_text(cfg.to_text())
    state = prepare_state(cfg, spec)
    heldout = sample_heldout(state.snapshot, spec, cfg) if cfg.diagnostics.separation else None
    nan_at = _fault_step(fault)
    tc = cfg.train
    status, message = "completed", ""
    with open(out / "metrics.jsonl", "w") as mf, open(out / "timing.jsonl", "w") as tf, \
            open(out / "episodes.jsonl", "w") as ef:
        t0 = time.perf_counter()
        _checkpoint(state, out)
        while True:
            s = state.step
            group = rollout(state, spec, tc)
            ticking = s % cfg.diagnostics.every == 0 or s == tc.steps
            rec = tick_metrics(state, group, spec, cfg, heldout) if ticking else None
            if s == tc.steps:
                mf.write(_dump(rec) + "\n")
                tf.write(_dump({"step": s, "wall_clock": time.perf_counter() - t0}) + "\n")
                break
            try:
                if nan_at == s:
                    group = replace(group, advantages=np.full(group.size, np.nan))
                state, step_rec = train_step(state, spec, tc, group)
            except NonFiniteLoss as exc:
                if rec is not None:
                    mf.write(_dump(rec) + "\n")
                status, message = "aborted", str(exc)
                log.error("run halted: %s", exc)
                break
            if rec is not None:
                rec.update({f"loss_{k}": v for k, v in step_rec.losses.items()})
                rec["grad_norm"] = step_rec.grad_norm
                mf.write(_dump(rec) + "\n")
                tf.write(_dump({"step": s, "wall_clock": time.perf_counter() - t0}) + "\n")
            for i, e in enumerate(step_rec.episodes):
                ef.write(_dump({
                    "step": s, "prompt": e.prompt, "response": e.response, "r_fmt": e.r_fmt,
                    "r_sem": e.r_sem, "reward": e.reward, "advantage": float(step_rec.advantages[i]),
                    "log_likelihood": float(step_rec.log_likelihoods[i]),
                    "token_log_probs": [float(x) for x in step_rec.token_log_probs[i]],
                }) + "\n")
            if state.step % cfg.run.checkpoint_every == 0:
                _checkpoint(state, out)
        if status == "completed":
            _checkpoint(state, out)
    result = RunResult(status, state.step, out, message)
    (out / "summary.json").write_text(_dump({
        "status": status, "steps_completed": state.step, "steps_requested": tc.steps,
        "seed": tc.seed, "seal_weight": tc.seal_weight, "message": message,
        "final_metrics": read_metrics(out)[-1] if read_metrics(out) else None,
    }) + "\n")
    return result


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------- compare

CURVE_FIELDS = ("token_entropy", "trajectory_entropy", "reward_mean", "duplication_ratio",
                "probe_accuracy", "cosine_gap", "seal_heldout_loss")


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def _labels(alphas: list[float]) -> list[str]:
    """Run labels; a repeated α gets a suffix so controls like (0, 0) stay distinct."""
    seen: dict[str, int] = {}
    out = []
    for a in alphas:
        base = f"{a:g}"
        seen[base] = seen.get(base, 0) + 1
        out.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return out


def compare(cfg: ExperimentConfig, alphas, seeds, out=None) -> dict:
    """Matched-seed runs per α; deltas are each α run minus the first α = 0 run, seed by seed."""
    alphas = [float(a) for a in alphas]
    if len(alphas) < 2 or 0.0 not in alphas:
        raise ValueError("compare needs at least two α values, one of them 0")
    out = Path(out or cfg.run.out)
    labels = _labels(alphas)
    runs: dict[str, dict[int, list[dict]]] = {}
    for a, label in zip(alphas, labels):
        runs[label] = {}
        for s in seeds:
            run_cfg = replace(cfg, train=replace(cfg.train, seal_weight=a, seed=int(s)))
            d = out / f"alpha_{label}" / f"seed_{s}"
            train(run_cfg, d)
            runs[label][s] = read_metrics(d)

    curves = {}
    for label, by_seed in runs.items():
        steps = sorted({r["step"] for recs in by_seed.values() for r in recs})
        curves[label] = {
            f: [_mean_or_none([next((r.get(f) for r in recs if r["step"] == st), None)
                               for recs in by_seed.values()]) for st in steps]
            for f in CURVE_FIELDS
        } | {"step": steps}

    def final(label, s, f):
        return runs[label][s][-1].get(f) if runs[label][s] else None

    def peak(label, s, f):
        vals = [r[f] for r in runs[label][s] if f in r]
        return max(vals) if vals else None

    def diff(x, y):
        return None if x is None or y is None else x - y

    baseline = labels[alphas.index(0.0)]
    deltas = {}
    for label in labels:
        if label == baseline:
            continue
        deltas[label] = []
        for s in seeds:
            row = {"seed": s}
            for f in CURVE_FIELDS:
                row[f"final_{f}"] = diff(final(label, s, f), final(baseline, s, f))
            row["peak_token_entropy"] = diff(peak(label, s, "token_entropy"), peak(baseline, s, "token_entropy"))
            deltas[label].append(row)
    report = {"alphas": alphas, "labels": labels, "baseline": baseline, "seeds": list(seeds),
              "curves": curves, "paired_deltas": deltas}
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


# ---------------------------------------------------------------- export

def export_trajectories(run_dir, dest=None) -> Path:
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not (run_dir / "config.conf").exists():
        raise FileNotFoundError(f"no run found at {run_dir}")
    dest = Path(dest) if dest else run_dir / "trajectories.jsonl"
    src = run_dir / "episodes.jsonl"
    with open(dest, "w") as fh:
        if src.exists():
            for line in src.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    fh.write(_dump({k: rec[k] for k in EPISODE_FIELDS}) + "\n")
    return dest
