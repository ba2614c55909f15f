"""Group-relative policy-gradient training with the SEAL auxiliary classifier."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import env as envlib
from .numerics import (ParamVector, Tape, Tensor, add, log_sigmoid, log_softmax, matmul, mul, pick_last, scale,
                       slice_axis, softmax_op, tanh, total)
from .numerics.autodiff import _sigmoid, _softmax_last
from .policy import PolicySnapshot, _leaves, network, sample_group

SEAL_PREFIX = "seal."


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    group_size: int = 8
    seal_weight: float = 0.0
    kl_coef: float = 0.01
    temperature: float = 1.0
    advantage_mode: str = "standardized"
    steps: int = 200
    seed: int = 0
    seal_start_step: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.seal_weight < 0 or self.kl_coef < 0:
            raise ValueError("seal_weight and kl_coef must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.advantage_mode not in ("centered", "standardized"):
            raise ValueError(f"unknown advantage_mode {self.advantage_mode!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


# ---------------------------------------------------------------- advantages

def compute_advantages(rewards, mode: str = "standardized") -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    a = r - r.mean()
    if mode == "centered":
        return a
    if mode != "standardized":
        raise ValueError(f"unknown advantage mode {mode!r}")
    std = np.sqrt(np.mean(a * a))
    if std == 0.0:
        return np.zeros_like(a)
    a = a / std
    # division can reintroduce an O(eps) offset; recentre once
    return a - a.mean()


@dataclass
class Group:
    prompt: list[int]
    episodes: list[envlib.Episode]
    advantages: np.ndarray

    def __post_init__(self):
        if len(self.episodes) < 2:
            raise ValueError("group size must be >= 2")
        if len(self.advantages) != len(self.episodes):
            raise ValueError("one advantage per trajectory required")

    @property
    def responses(self) -> list[list[int]]:
        return [e.response for e in self.episodes]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.correct for e in self.episodes], dtype=np.float64)

    @property
    def size(self) -> int:
        return len(self.episodes)


# ---------------------------------------------------------------- batched scoring

@dataclass
class BatchTrace:
    log_likelihood: Tensor      # (N,)
    token_log_probs: Tensor     # (N, C), zero where mask is False
    hidden: Tensor              # (N, C, d)
    logits: Tensor              # (N, C, V)
    mask: np.ndarray            # (N, C) positions that predict a response token

    def hidden_rows(self, i: int) -> np.ndarray:
        return self.hidden.value[i][self.mask[i]]

    def token_entropies(self, i: int) -> np.ndarray:
        lp = log_softmax(self.logits.value[i][self.mask[i]]).value
        return -np.sum(np.exp(lp) * lp, axis=-1)


def batch_trace(snapshot: PolicySnapshot, prompts, responses, tape: Tape | None = None,
                params: dict[str, Tensor] | None = None) -> BatchTrace:
    """Score many (prompt, response) pairs in one padded pass."""
    C = snapshot.arch.context_window
    n = len(responses)
    tokens = np.zeros((n, C), dtype=np.int64)
    targets = np.zeros((n, C), dtype=np.int64)
    mask = np.zeros((n, C), dtype=bool)
    for i, (p, r) in enumerate(zip(prompts, responses)):
        p, r = list(p), list(r)
        if len(p) + len(r) > C:
            raise ValueError(f"sequence length {len(p) + len(r)} exceeds context window {C}")
        seq = p + r[:-1]
        tokens[i, :len(seq)] = seq
        if r:
            targets[i, len(p) - 1:len(p) - 1 + len(r)] = r
            mask[i, len(p) - 1:len(p) - 1 + len(r)] = True
    if params is None:
        params = _leaves(snapshot.params, tape)
    h, logits = network(params, tokens, snapshot.arch)
    tok = mul(pick_last(log_softmax(logits), targets), mask.astype(np.float64))
    return BatchTrace(total(tok, axis=-1), tok, h, logits, mask)


# ---------------------------------------------------------------- SEAL head

def init_seal_head(model_dim: int, seed, scale_: float = 0.1) -> ParamVector:
    rng = np.random.default_rng(seed)
    half = max(model_dim // 2, 1)
    return ParamVector({
        "seal.w1": rng.normal(0.0, scale_, (model_dim, half)),
        "seal.b1": np.zeros((1, half)),
        "seal.w2": rng.normal(0.0, scale_, (half, 1)),
        "seal.b2": np.zeros((1, 1)),
    })


def seal_logit(head: dict[str, Tensor], h) -> Tensor:
    """Pre-sigmoid classifier output for hidden states (..., d) -> (..., 1)."""
    z = tanh(add(matmul(h, head["seal.w1"]), head["seal.b1"]))
    return add(matmul(z, head["seal.w2"]), head["seal.b2"])


def seal_probs(head: ParamVector, hidden: np.ndarray) -> np.ndarray:
    u = seal_logit(_leaves(head), hidden).value[..., 0]
    return _sigmoid(u)


def _seal_term(bt: BatchTrace, head_leaves: dict[str, Tensor], labels: np.ndarray) -> Tensor:
    n_tokens = int(bt.mask.sum())
    if n_tokens == 0:
        raise ValueError("SEAL loss needs at least one response token")
    u = slice_axis(seal_logit(head_leaves, bt.hidden), -1, 0, 1)
    z = labels[:, None, None]
    m = bt.mask[:, :, None].astype(np.float64)
    pos = mul(log_sigmoid(u), z * m)
    neg = mul(log_sigmoid(scale(u, -1.0)), (1.0 - z) * m)
    return scale(total(add(pos, neg)), -1.0 / n_tokens)


def _kl_term(bt: BatchTrace, ref_log_probs: np.ndarray) -> Tensor:
    n_tokens = int(bt.mask.sum())
    if n_tokens == 0:
        raise ValueError("KL anchor needs at least one response token")
    logp = log_softmax(bt.logits)
    per_pos = total(mul(softmax_op(bt.logits), add(logp, -ref_log_probs)), axis=-1)
    return scale(total(mul(per_pos, bt.mask.astype(np.float64))), 1.0 / n_tokens)


def _rl_term(bt: BatchTrace, advantages: np.ndarray) -> Tensor:
    return scale(total(mul(bt.log_likelihood, np.asarray(advantages, dtype=np.float64))), -1.0)


def rl_loss(group: Group, snapshot: PolicySnapshot) -> tuple[Tensor, Tape]:
    """L_RL = -sum_i A_i l_i on a fresh tape."""
    tape = Tape()
    bt = batch_trace(snapshot, [group.prompt] * group.size, group.responses, tape=tape)
    return _rl_term(bt, group.advantages), tape


def seal_loss(group: Group, snapshot: PolicySnapshot, head: ParamVector) -> tuple[Tensor, Tape]:
    tape = Tape()
    leaves = {**tape.params(snapshot.params), **tape.params(head)}
    bt = batch_trace(snapshot, [group.prompt] * group.size, group.responses, params=leaves)
    return _seal_term(bt, leaves, group.labels), tape


def _reference_log_probs(reference: PolicySnapshot, snapshot: PolicySnapshot, prompts, responses) -> np.ndarray:
    if reference.arch != snapshot.arch:
        raise ValueError("reference policy must share the architecture")
    ref = batch_trace(reference, prompts, responses)
    return log_softmax(ref.logits.value).value


def kl_anchor_loss(group: Group, snapshot: PolicySnapshot, reference: PolicySnapshot) -> tuple[Tensor, Tape]:
    """Mean per-position KL(pi_theta || pi_ref) over the group's response positions."""
    prompts = [group.prompt] * group.size
    ref_lp = _reference_log_probs(reference, snapshot, prompts, group.responses)
    tape = Tape()
    bt = batch_trace(snapshot, prompts, group.responses, tape=tape)
    return _kl_term(bt, ref_lp), tape


def kl_categorical(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


# ---------------------------------------------------------------- training state

@dataclass(frozen=True)
class TrainState:
    snapshot: PolicySnapshot
    head: ParamVector
    reference: PolicySnapshot
    step: int = 0


def initial_state(snapshot: PolicySnapshot, seed=0) -> TrainState:
    return TrainState(snapshot, init_seal_head(snapshot.arch.model_dim, [seed, 7]), snapshot, 0)


@dataclass
class StepRecord:
    step: int
    prompt: list[int]
    episodes: list[envlib.Episode]
    advantages: np.ndarray
    log_likelihoods: np.ndarray
    token_log_probs: list[np.ndarray]
    token_entropies: list[np.ndarray]
    mean_hidden: np.ndarray
    losses: dict[str, float]
    grad_norm: float
    version: int
    extra: dict = field(default_factory=dict)


def rollout_seeds(seed: int, step: int, group_size: int) -> list[tuple[int, int, int]]:
    return [(int(seed), int(step), i) for i in range(group_size)]


def rollout(state: TrainState, spec: envlib.ToolQASpec, config: TrainConfig) -> Group:
    prompts = spec.prompts()
    prompt = prompts[state.step % len(prompts)]
    seeds = rollout_seeds(config.seed, state.step, config.group_size)
    responses = sample_group(state.snapshot, prompt, seeds, config.temperature, spec.max_response_len, spec.eos)
    episodes = [envlib.make_episode(spec, prompt, r) for r in responses]
    adv = compute_advantages([e.reward for e in episodes], config.advantage_mode)
    return Group(prompt, episodes, adv)


def group_loss(state: TrainState, group: Group, config: TrainConfig):
    """Total loss on one tape.  The SEAL head only enters the tape when its term is active."""
    use_seal = config.seal_weight > 0 and state.step >= config.seal_start_step
    use_kl = config.kl_coef > 0
    prompts = [group.prompt] * group.size
    ref_lp = _reference_log_probs(state.reference, state.snapshot, prompts, group.responses) if use_kl else None
    tape = Tape()
    leaves = tape.params(state.snapshot.params)
    if use_seal:
        leaves.update(tape.params(state.head))
    bt = batch_trace(state.snapshot, prompts, group.responses, params=leaves)
    terms = {"rl": _rl_term(bt, group.advantages)}
    loss = terms["rl"]
    if use_seal:
        terms["seal"] = _seal_term(bt, leaves, group.labels)
        loss = add(loss, scale(terms["seal"], config.seal_weight))
    if use_kl:
        terms["kl"] = _kl_term(bt, ref_lp)
        loss = add(loss, scale(terms["kl"], config.kl_coef))
    return loss, tape, bt, {k: float(v.value) for k, v in terms.items()}, use_seal


def train_step(state: TrainState, spec: envlib.ToolQASpec, config: TrainConfig,
               group: Group | None = None) -> tuple[TrainState, StepRecord]:
    """One rollout + plain gradient-descent update.  Raises NonFiniteLoss without touching state."""
    if group is None:
        group = rollout(state, spec, config)
    loss, tape, bt, terms, use_seal = group_loss(state, group, config)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {terms}")
    grads = tape.backward(loss)
    policy_grad = grads.select(state.snapshot.params.keys())
    if not grads.allfinite():
        raise NonFiniteLoss(f"non-finite gradient at step {state.step}")
    eta = config.learning_rate
    new_snapshot = state.snapshot.with_params(state.snapshot.params - policy_grad * eta)
    head = state.head
    if use_seal:
        head = head - grads.select(head.keys()) * eta
    terms["total"] = float(loss.value)
    n = group.size
    record = StepRecord(
        step=state.step,
        prompt=list(group.prompt),
        episodes=group.episodes,
        advantages=group.advantages,
        log_likelihoods=np.array(bt.log_likelihood.value, dtype=np.float64),
        token_log_probs=[bt.token_log_probs.value[i][bt.mask[i]] for i in range(n)],
        token_entropies=[bt.token_entropies(i) for i in range(n)],
        mean_hidden=np.stack([bt.hidden_rows(i).mean(axis=0) if bt.mask[i].any()
                              else np.zeros(state.snapshot.arch.model_dim) for i in range(n)]),
        losses=terms,
        grad_norm=grads.norm(),
        version=state.snapshot.version,
    )
    return replace(state, snapshot=new_snapshot, head=head, step=state.step + 1), record


# ---------------------------------------------------------------- mid-training

def supervised_loss(snapshot: PolicySnapshot, demos, tape: Tape | None = None) -> Tensor:
    """Mean token-level cross-entropy on demonstration responses."""
    prompts = [p for p, _ in demos]
    responses = [r for _, r in demos]
    bt = batch_trace(snapshot, prompts, responses, tape=tape)
    return scale(total(bt.log_likelihood), -1.0 / max(int(bt.mask.sum()), 1))


def mid_train(snapshot: PolicySnapshot, demos, epochs: int, learning_rate: float,
              return_losses: bool = False):
    """Full-batch gradient descent on demonstrations; one update per epoch."""
    if not demos:
        raise ValueError("demonstrations must be nonempty")
    losses = []
    for _ in range(epochs):
        tape = Tape()
        loss = supervised_loss(snapshot, demos, tape)
        losses.append(float(loss.value))
        g = tape.backward(loss)
        snapshot = snapshot.with_params(snapshot.params - g * learning_rate)
    if return_losses:
        losses.append(float(supervised_loss(snapshot, demos).value))
        return snapshot, losses
    return snapshot

