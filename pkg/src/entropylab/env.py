"""ToolQA: a single-turn key lookup task with a tool-call grammar.

A response is format-valid when it is zero or more ``THINK filler+ DOT``
segments followed by exactly ``CALL LOOKUP key ENDCALL value EOS``.  The
reward factorises into a format bit and a semantic bit, with a small penalty
for malformed responses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

SUCCESS_REWARD = 10.0
FORMAT_PENALTY = 0.1

# grammar automaton states
_START, _THINK, _FILL, _CALL, _LOOKUP, _KEY, _END, _VALUE, _ACCEPT, _DEAD = range(10)
ACCEPT = _ACCEPT


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class ToolQASpec:
    keys: tuple[int, ...]
    values: tuple[int, ...]
    answers: tuple[int, ...]          # answers[i] is the value token for keys[i]
    bos: int
    eos: int
    call: int
    endcall: int
    lookup: int
    dot: int
    think: int | None
    fillers: tuple[int, ...]
    max_response_len: int
    token_names: tuple[str, ...] = field(compare=False)
    success_reward: float = SUCCESS_REWARD
    format_penalty: float = FORMAT_PENALTY

    def __post_init__(self):
        ids = [self.bos, self.eos, self.call, self.endcall, self.lookup, self.dot, *self.keys, *self.values,
               *self.fillers] + ([] if self.think is None else [self.think])
        if len(set(ids)) != len(ids):
            raise ValueError("token ids must be distinct")
        if sorted(ids) != list(range(len(ids))):
            raise ValueError("token ids must cover 0..|V|-1")
        if len(self.answers) != len(self.keys) or not set(self.answers) <= set(self.values):
            raise ValueError("lookup table must map every key to a value token")
        if self.fillers and self.think is None:
            raise ValueError("filler tokens require a THINK token")

    @property
    def vocab_size(self) -> int:
        return len(self.token_names)

    @property
    def table(self) -> dict[int, int]:
        return dict(zip(self.keys, self.answers))

    def prompts(self) -> list[list[int]]:
        return [[self.bos, k] for k in self.keys]

    def name(self, tok: int) -> str:
        return self.token_names[tok]

    def render(self, tokens) -> str:
        return " ".join(self.token_names[t] for t in tokens)

    def transitions(self) -> np.ndarray:
        V = self.vocab_size
        tab = np.full((_DEAD + 1, V), _DEAD, dtype=np.int8)
        tab[_START, self.call] = _CALL
        if self.think is not None:
            tab[_START, self.think] = _THINK
            for f in self.fillers:
                tab[_THINK, f] = _FILL
                tab[_FILL, f] = _FILL
            tab[_FILL, self.dot] = _START
        tab[_CALL, self.lookup] = _LOOKUP
        for k in self.keys:
            tab[_LOOKUP, k] = _KEY
        tab[_KEY, self.endcall] = _END
        for v in self.values:
            tab[_END, v] = _VALUE
        tab[_VALUE, self.eos] = _ACCEPT
        return tab

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_names"] = list(self.token_names)
        return d


def build_spec(num_keys: int = 2, num_values: int = 2, think: bool = False, num_fillers: int = 0,
               max_response_len: int = 6, answers=None, success_reward: float = SUCCESS_REWARD,
               format_penalty: float = FORMAT_PENALTY) -> ToolQASpec:
    names = ["BOS", "EOS", "CALL", "ENDCALL", "LOOKUP"]
    keys = tuple(range(len(names), len(names) + num_keys))
    names += [f"K{i}" for i in range(num_keys)]
    values = tuple(range(len(names), len(names) + num_values))
    names += [f"V{i}" for i in range(num_values)]
    dot = len(names)
    names.append("DOT")
    think_id, fillers = None, ()
    if think:
        think_id = len(names)
        names.append("THINK")
        fillers = tuple(range(len(names), len(names) + num_fillers))
        names += [f"F{i}" for i in range(num_fillers)]
    if answers is None:
        answers = tuple(values[i % num_values] for i in range(num_keys))
    else:
        answers = tuple(values[a] for a in answers)
    return ToolQASpec(keys, values, answers, 0, 1, 2, 3, 4, dot, think_id, fillers, max_response_len,
                      tuple(names), success_reward, format_penalty)


def micro_spec() -> ToolQASpec:
    return build_spec()


def small_spec() -> ToolQASpec:
    return build_spec(think=True, num_fillers=2, max_response_len=12)


# ---------------------------------------------------------------- scoring

def _run_automaton(spec: ToolQASpec, response) -> int:
    tab = spec.transitions()
    state = _START
    for t in response:
        if not 0 <= t < spec.vocab_size:
            return _DEAD
        state = tab[state, t]
    return int(state)


def score_format(spec: ToolQASpec, response) -> int:
    response = [int(t) for t in response]
    if len(response) > spec.max_response_len:
        return 0
    return int(_run_automaton(spec, response) == _ACCEPT)


def _query(spec: ToolQASpec, prompt) -> int:
    prompt = [int(t) for t in prompt]
    if len(prompt) != 2 or prompt[0] != spec.bos or prompt[1] not in spec.keys:
        raise PromptError(f"prompt must be [BOS, key], got {prompt}")
    return prompt[1]


def score_semantic(spec: ToolQASpec, prompt, response) -> int:
    """1 iff the looked-up answer is produced.

    For format-valid responses the answer slot is checked; otherwise the
    correct value token anywhere before EOS counts.
    """
    target = spec.table[_query(spec, prompt)]
    response = [int(t) for t in response]
    if score_format(spec, response):
        return int(response[-2] == target)
    body = response[:response.index(spec.eos)] if spec.eos in response else response
    return int(target in body)


def hallucinated_argument(spec: ToolQASpec, prompt, response) -> int:
    response = [int(t) for t in response]
    if not score_format(spec, response):
        return 0
    return int(response[-4] != _query(spec, prompt))


def reward(spec: ToolQASpec, r_fmt: int, r_sem: int) -> float:
    return spec.success_reward * r_fmt * r_sem - spec.format_penalty * (1 - r_fmt)


@dataclass
class Episode:
    prompt: list[int]
    response: list[int]
    r_fmt: int
    r_sem: int
    reward: float
    hallucinated_arg: int

    @property
    def correct(self) -> int:
        return int(self.reward > 0)

    def to_dict(self) -> dict:
        return asdict(self)


def make_episode(spec: ToolQASpec, prompt, response) -> Episode:
    prompt, response = [int(t) for t in prompt], [int(t) for t in response]
    f = score_format(spec, response)
    s = score_semantic(spec, prompt, response)
    return Episode(prompt, response, f, s, reward(spec, f, s), hallucinated_argument(spec, prompt, response))


def chunks(spec: ToolQASpec, response) -> list[tuple[int, ...]]:
    """Delimiter-separated pieces of a response (DOT and EOS delimit; empty pieces dropped)."""
    out, cur = [], []
    for t in response:
        if t == spec.dot or t == spec.eos:
            if cur:
                out.append(tuple(cur))
            cur = []
        else:
            cur.append(int(t))
    if cur:
        out.append(tuple(cur))
    return out


# ---------------------------------------------------------------- batched scoring

def score_batch(spec: ToolQASpec, query: int, tokens: np.ndarray, lengths: np.ndarray):
    """Vectorised (r_fmt, r_sem) for padded responses ``tokens`` (N, L), pad = -1."""
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    n, L = tokens.shape
    tab = spec.transitions()
    state = np.full(n, _START, dtype=np.int8)
    for j in range(L):
        live = j < lengths
        state[live] = tab[state[live], tokens[live, j]]
    fmt = (state == _ACCEPT) & (lengths <= spec.max_response_len)
    target = spec.table[query]
    cols = np.arange(L)[None, :]
    is_eos = (tokens == spec.eos) & (cols < lengths[:, None])
    first_eos = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1), lengths)
    anywhere = ((tokens == target) & (cols < first_eos[:, None])).any(axis=1)
    slot = tokens[np.arange(n), np.clip(lengths - 2, 0, L - 1)]
    sem = np.where(fmt, slot == target, anywhere)
    return fmt.astype(np.int8), sem.astype(np.int8)


# ---------------------------------------------------------------- demonstrations

def demonstrations(spec: ToolQASpec, count: int, rng_seed=0, fillers: bool = True) -> list[tuple[list[int], list[int]]]:
    """Valid, correct (prompt, response) pairs, stratified over keys."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    keys = [spec.keys[i % len(spec.keys)] for i in range(count)]
    rng.shuffle(keys)
    out = []
    for k in keys:
        tail = [spec.call, spec.lookup, k, spec.endcall, spec.table[k], spec.eos]
        body: list[int] = []
        if fillers and spec.think is not None and spec.fillers:
            for _ in range(int(rng.integers(0, 3))):
                seg = [spec.think] + [int(rng.choice(spec.fillers)) for _ in range(int(rng.integers(1, 3)))] + [spec.dot]
                if len(body) + len(seg) + len(tail) > spec.max_response_len:
                    break
                body += seg
        out.append(([spec.bos, k], body + tail))
    return out
