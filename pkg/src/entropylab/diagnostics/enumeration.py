"""Exact enumeration of a policy's response distribution for one prompt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..env import ToolQASpec
from ..numerics import ParamVector
from ..policy import PolicySnapshot, batch_next_log_probs

DEFAULT_GUARD = 5_000_000


class EnumerationGuardError(ValueError):
    pass


@dataclass
class EnumeratedDistribution:
    """All complete responses (EOS-terminated or of length L) with their probabilities.

    ``tokens`` is padded with -1; rows are in lexicographic token order with a
    prefix sorting before its extensions.  ``log_prob_rates`` holds the
    directional derivative of each log-probability when a direction was given.
    """
    prompt: list[int]
    tokens: np.ndarray
    lengths: np.ndarray
    log_probs: np.ndarray
    max_len: int
    log_prob_rates: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __len__(self) -> int:
        return len(self.lengths)

    def trajectory(self, i: int) -> list[int]:
        return self.tokens[i, :self.lengths[i]].tolist()

    def __iter__(self):
        p = self.probs
        for i in range(len(self)):
            yield self.trajectory(i), float(p[i])

    def normalization_error(self) -> float:
        return abs(float(np.sum(self.probs)) - 1.0)

    def index_of(self, response) -> int:
        response = list(response)
        row = np.full(self.max_len, -1)
        row[:len(response)] = response
        hits = np.flatnonzero((self.lengths == len(response)) & np.all(self.tokens == row, axis=1))
        if not hits.size:
            raise KeyError(f"response {response} is not a complete trajectory")
        return int(hits[0])

    def entropy(self) -> float:
        return float(-np.sum(self.probs * self.log_probs))


def enumerate_distribution(snapshot: PolicySnapshot, spec: ToolQASpec, prompt,
                           direction: ParamVector | None = None,
                           guard: int = DEFAULT_GUARD) -> EnumeratedDistribution:
    """Expand the prefix tree level by level; mass is conserved exactly by construction."""
    V, L, eos = snapshot.arch.vocab_size, spec.max_response_len, spec.eos
    if V ** L > guard:
        raise EnumerationGuardError(f"|V|^L = {V}^{L} = {V ** L} exceeds the enumeration bound {guard}")
    if direction is not None:
        direction = direction.select(snapshot.params.keys())
    prompt = [int(t) for t in prompt]
    others = np.array([v for v in range(V) if v != eos])

    frontier = np.zeros((1, 0), dtype=np.int64)
    f_lp = np.zeros(1)
    f_dl = np.zeros(1)
    done_tok, done_lp, done_dl, done_len = [], [], [], []

    def emit(seqs, lp, dl):
        padded = np.full((len(seqs), L), -1, dtype=np.int64)
        padded[:, :seqs.shape[1]] = seqs
        done_tok.append(padded)
        done_lp.append(lp)
        done_dl.append(dl)
        done_len.append(np.full(len(seqs), seqs.shape[1]))

    for depth in range(L):
        seqs = np.concatenate([np.broadcast_to(prompt, (len(frontier), len(prompt))), frontier], axis=1)
        logp, dlogp = batch_next_log_probs(snapshot, seqs, direction)
        if dlogp is None:
            dlogp = np.zeros_like(logp)
        emit(np.concatenate([frontier, np.full((len(frontier), 1), eos)], axis=1),
             f_lp + logp[:, eos], f_dl + dlogp[:, eos])
        children = np.concatenate([np.repeat(frontier, len(others), axis=0),
                                   np.tile(others, len(frontier))[:, None]], axis=1)
        c_lp = (f_lp[:, None] + logp[:, others]).ravel()
        c_dl = (f_dl[:, None] + dlogp[:, others]).ravel()
        if depth == L - 1:
            emit(children, c_lp, c_dl)
        else:
            frontier, f_lp, f_dl = children, c_lp, c_dl

    tokens = np.concatenate(done_tok)
    order = np.lexsort(tokens.T[::-1])
    return EnumeratedDistribution(
        prompt=prompt,
        tokens=tokens[order],
        lengths=np.concatenate(done_len)[order],
        log_probs=np.concatenate(done_lp)[order],
        max_len=L,
        log_prob_rates=np.concatenate(done_dl)[order] if direction is not None else None,
    )
