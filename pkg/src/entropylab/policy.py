"""Tiny causal transformer policy over integer tokens.

The output matrix ``W`` (|V| x d) is kept apart from the backbone parameters
so gradients can be split into a W-block and a backbone block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (ParamVector, Tape, Tensor, add, concat_last, log_softmax, matmul, pick_last, scale,
                       slice_axis, softmax_op, take_rows, tanh, total, transpose_last)
from .numerics.autodiff import _softmax_last

OUTPUT = "W"


class PolicyInputError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyArchitecture:
    vocab_size: int
    model_dim: int = 32
    context_window: int = 8
    num_heads: int = 2
    num_blocks: int = 1
    ffn_dim: int = 64

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if min(self.vocab_size, self.model_dim, self.context_window, self.num_blocks, self.ffn_dim) < 1:
            raise ValueError("architecture sizes must be positive")

    def segment_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.model_dim, self.ffn_dim
        shapes = {"tok_emb": (self.vocab_size, d), "pos_emb": (self.context_window, d)}
        for b in range(self.num_blocks):
            for m in ("wq", "wk", "wv", "wo"):
                shapes[f"block{b}.{m}"] = (d, d)
            shapes[f"block{b}.w1"] = (d, f)
            shapes[f"block{b}.b1"] = (1, f)
            shapes[f"block{b}.w2"] = (f, d)
            shapes[f"block{b}.b2"] = (1, d)
        shapes[OUTPUT] = (self.vocab_size, d)
        return shapes


@dataclass(frozen=True)
class PolicySnapshot:
    params: ParamVector
    arch: PolicyArchitecture
    version: int = 0

    def __post_init__(self):
        expected = self.arch.segment_shapes()
        if self.params.shapes != expected:
            raise ValueError(f"parameter layout does not match architecture: {self.params.shapes}")
        if not self.params.allfinite():
            raise ValueError("snapshot parameters must be finite")

    @property
    def W(self) -> np.ndarray:
        return self.params[OUTPUT]

    @property
    def phi(self) -> ParamVector:
        return self.params.without([OUTPUT])

    def with_params(self, params: ParamVector) -> PolicySnapshot:
        return replace(self, params=params, version=self.version + 1)


def init_snapshot(arch: PolicyArchitecture, seed, scale: float = 0.02,
                  output_scale: float = 0.002) -> PolicySnapshot:
    rng = np.random.default_rng(seed)
    segs = {}
    for name, shape in arch.segment_shapes().items():
        if name == OUTPUT:
            segs[name] = rng.normal(0.0, output_scale, shape)
        elif name.endswith((".b1", ".b2")):
            segs[name] = np.zeros(shape)
        else:
            segs[name] = rng.normal(0.0, scale, shape)
    return PolicySnapshot(ParamVector(segs), arch)


# ---------------------------------------------------------------- network

def network(p: dict[str, Tensor], tokens: np.ndarray, arch: PolicyArchitecture) -> tuple[Tensor, Tensor]:
    """Final hidden states and logits for every position of ``tokens`` (shape (..., T))."""
    T = tokens.shape[-1]
    d, H = arch.model_dim, arch.num_heads
    dh = d // H
    mask = np.tril(np.ones((T, T), dtype=bool))
    x = add(take_rows(p["tok_emb"], tokens), slice_axis(p["pos_emb"], -2, 0, T))
    for b in range(arch.num_blocks):
        q = matmul(x, p[f"block{b}.wq"])
        k = matmul(x, p[f"block{b}.wk"])
        v = matmul(x, p[f"block{b}.wv"])
        heads = []
        for h in range(H):
            lo, hi = h * dh, (h + 1) * dh
            qh, kh, vh = (slice_axis(t, -1, lo, hi) for t in (q, k, v))
            att = softmax_op(scale(matmul(qh, transpose_last(kh)), 1.0 / np.sqrt(dh)), mask)
            heads.append(matmul(att, vh))
        x = add(x, matmul(concat_last(heads), p[f"block{b}.wo"]))
        hidden = tanh(add(matmul(x, p[f"block{b}.w1"]), p[f"block{b}.b1"]))
        x = add(x, add(matmul(hidden, p[f"block{b}.w2"]), p[f"block{b}.b2"]))
    logits = matmul(x, transpose_last(p[OUTPUT]))
    return x, logits


def _leaves(params: ParamVector, tape: Tape | None = None, tangents: ParamVector | None = None):
    if tape is not None:
        return tape.params(params, tangents)
    return {k: Tensor(v, None if tangents is None or k not in tangents else tangents[k])
            for k, v in params.items()}


def _padded(tokens: list[int], arch: PolicyArchitecture) -> np.ndarray:
    # Fixed-length passes keep every per-position value bit-identical across prefix lengths.
    out = np.zeros(arch.context_window, dtype=np.int64)
    out[:len(tokens)] = tokens
    return out


def _validate(snapshot: PolicySnapshot, prompt, response) -> None:
    arch = snapshot.arch
    toks = list(prompt) + list(response)
    if not prompt:
        raise PolicyInputError("prompt must contain at least one token")
    bad = [t for t in toks if not 0 <= int(t) < arch.vocab_size]
    if bad:
        raise PolicyInputError(f"token ids out of range [0, {arch.vocab_size}): {bad}")
    if len(toks) > arch.context_window:
        raise PolicyInputError(
            f"sequence length {len(toks)} exceeds context window {arch.context_window}")


@dataclass
class TokenDiagnostics:
    position: int
    hidden: np.ndarray
    probs: np.ndarray
    token: int
    residual: np.ndarray


@dataclass
class Trace:
    """Everything a forward pass over one response produces."""
    log_likelihood: Tensor
    token_log_probs: Tensor
    hidden: Tensor
    logits: Tensor
    response: list[int]
    tape: Tape | None

    def diagnostics(self) -> list[TokenDiagnostics]:
        out = []
        for k, tok in enumerate(self.response):
            probs = _softmax_last(self.logits.value[k:k + 1])[0]
            e = np.zeros_like(probs)
            e[tok] = 1.0
            out.append(TokenDiagnostics(k, self.hidden.value[k].copy(), probs, tok, e - probs))
        return out


def trace(snapshot: PolicySnapshot, prompt, response, tape: Tape | None = None,
          params: dict[str, Tensor] | None = None) -> Trace:
    """Score ``response`` given ``prompt``; prompt tokens are conditioned on, never scored."""
    prompt, response = [int(t) for t in prompt], [int(t) for t in response]
    _validate(snapshot, prompt, response)
    if params is None:
        params = _leaves(snapshot.params, tape)
    T, P = len(response), len(prompt)
    if T == 0:
        zero = Tensor(np.float64(0.0))
        empty = Tensor(np.zeros((0, snapshot.arch.model_dim)))
        return Trace(zero, Tensor(np.zeros(0)), empty, Tensor(np.zeros((0, snapshot.arch.vocab_size))),
                     response, tape)
    h, logits = network(params, _padded(prompt + response[:-1], snapshot.arch), snapshot.arch)
    h_r = slice_axis(h, -2, P - 1, P - 1 + T)
    logits_r = slice_axis(logits, -2, P - 1, P - 1 + T)
    tok_lp = pick_last(log_softmax(logits_r), np.array(response))
    return Trace(total(tok_lp, axis=-1), tok_lp, h_r, logits_r, response, tape)


def forward(snapshot: PolicySnapshot, prompt, response) -> tuple[float, list[TokenDiagnostics]]:
    tr = trace(snapshot, prompt, response)
    return float(tr.log_likelihood.value), tr.diagnostics()


def log_likelihood(snapshot: PolicySnapshot, prompt, response) -> float:
    return float(trace(snapshot, prompt, response).log_likelihood.value)


def full_next_token_table(snapshot: PolicySnapshot, prompt, partial, temperature: float = 1.0) -> np.ndarray:
    return _softmax_last(next_token_logits(snapshot, prompt, partial)[None, :] / temperature)[0]


def next_token_logits(snapshot: PolicySnapshot, prompt, partial) -> np.ndarray:
    prompt, partial = [int(t) for t in prompt], [int(t) for t in partial]
    _validate(snapshot, prompt, partial + [0])
    _, logits = network(_leaves(snapshot.params), _padded(prompt + partial, snapshot.arch), snapshot.arch)
    return logits.value[len(prompt) + len(partial) - 1]


def batch_next_log_probs(snapshot: PolicySnapshot, sequences: np.ndarray,
                         direction: ParamVector | None = None, chunk: int = 4096):
    """Next-token log-probabilities after each row of ``sequences`` (N, T).

    With ``direction`` also returns their directional derivative along it
    (forward-mode), else ``None`` in its place.
    """
    sequences = np.asarray(sequences, dtype=np.int64)
    n = sequences.shape[0]
    V = snapshot.arch.vocab_size
    logp = np.empty((n, V))
    dlogp = np.empty((n, V)) if direction is not None else None
    leaves = _leaves(snapshot.params, tangents=direction)
    for lo in range(0, n, chunk):
        _, logits = network(leaves, sequences[lo:lo + chunk], snapshot.arch)
        last = slice_axis(logits, 1, logits.shape[1] - 1, logits.shape[1])
        lp = log_softmax(last)
        logp[lo:lo + chunk] = lp.value[:, 0]
        if dlogp is not None:
            dlogp[lo:lo + chunk] = lp.tangent[:, 0]
    return logp, dlogp


def perturbed_log_likelihoods(snapshot: PolicySnapshot, prompt, response, name: str,
                              values: np.ndarray) -> np.ndarray:
    """Log-likelihoods with segment ``name`` replaced by each of ``values`` (B, *shape)."""
    leaves = _leaves(snapshot.params)
    leaves[name] = Tensor(np.asarray(values, dtype=np.float64))
    return trace(snapshot, prompt, response, params=leaves).log_likelihood.value


def hidden_states(snapshot: PolicySnapshot, prompt, response) -> np.ndarray:
    """Per-token hidden states h_k (T, d) of a response."""
    return trace(snapshot, prompt, response).hidden.value


def mean_hidden(snapshot: PolicySnapshot, prompt, response) -> np.ndarray:
    h = hidden_states(snapshot, prompt, response)
    return h.mean(axis=0) if len(h) else np.zeros(snapshot.arch.model_dim)


# ---------------------------------------------------------------- sampling

def _draw(probs: np.ndarray, u: float) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), probs.size - 1))


def sample_group(snapshot: PolicySnapshot, prompt, seeds, temperature: float = 1.0,
                 max_len: int = 8, eos_id: int | None = None) -> list[list[int]]:
    """Ancestral sampling of one response per seed, batched across seeds."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prompt = [int(t) for t in prompt]
    _validate(snapshot, prompt, [0] * max_len)
    rngs = [np.random.default_rng(s) for s in seeds]
    seqs: list[list[int]] = [[] for _ in rngs]
    active = list(range(len(rngs)))
    leaves = _leaves(snapshot.params)
    for _ in range(max_len):
        if not active:
            break
        toks = np.array([prompt + seqs[i] for i in active], dtype=np.int64)
        _, logits = network(leaves, toks, snapshot.arch)
        probs = _softmax_last(logits.value[:, -1] / temperature)
        still = []
        for row, i in enumerate(active):
            tok = _draw(probs[row], rngs[i].random())
            seqs[i].append(tok)
            if tok != eos_id:
                still.append(i)
        active = still
    return seqs


def sample(snapshot: PolicySnapshot, prompt, temperature: float = 1.0, max_len: int = 8,
           rng_seed=0, eos_id: int | None = None) -> list[int]:
    return sample_group(snapshot, prompt, [rng_seed], temperature, max_len, eos_id)[0]


def greedy(snapshot: PolicySnapshot, prompt, max_len: int, eos_id: int | None = None) -> list[int]:
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(next_token_logits(snapshot, prompt, out)))
        out.append(tok)
        if tok == eos_id:
            break
    return out


# ---------------------------------------------------------------- gradients

@dataclass
class GradientBundle:
    trajectory_id: int
    version: int
    log_likelihood: float
    g: ParamVector
    w_block: np.ndarray
    w_block_closed: np.ndarray
    phi_block: ParamVector
    per_token_phi: list[ParamVector]
    diagnostics: list[TokenDiagnostics] = field(repr=False)


def trajectory_gradient(snapshot: PolicySnapshot, prompt, response, trajectory_id: int = 0) -> GradientBundle:
    tape = Tape()
    tr = trace(snapshot, prompt, response, tape=tape)
    diags = tr.diagnostics()
    if not response:
        z = snapshot.params.zeros_like()
        return GradientBundle(trajectory_id, snapshot.version, 0.0, z, z[OUTPUT], z[OUTPUT],
                              z.without([OUTPUT]), [], diags)
    g = tape.backward(tr.log_likelihood)
    per_token = []
    for k in range(len(tr.response)):
        seed = np.zeros(len(tr.response))
        seed[k] = 1.0
        per_token.append(tape.backward(tr.token_log_probs, seed).without([OUTPUT]))
    closed = sum(np.outer(t.residual, t.hidden) for t in diags)
    return GradientBundle(trajectory_id, snapshot.version, float(tr.log_likelihood.value), g,
                          g[OUTPUT], closed, g.without([OUTPUT]), per_token, diags)


# ---------------------------------------------------------------- serialization

_MAGIC = b"ELPOLICY1\n"


def dumps_snapshot(snapshot: PolicySnapshot) -> bytes:
    header = {
        "architecture": asdict(snapshot.arch),
        "version": snapshot.version,
        "segments": [{"name": k, "shape": list(v.shape)} for k, v in snapshot.params.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in snapshot.params.values())
    return _MAGIC + struct.pack("<Q", len(hb)) + hb + body


def loads_snapshot(blob: bytes) -> PolicySnapshot:
    if not blob.startswith(_MAGIC):
        raise ValueError("not a policy snapshot container")
    off = len(_MAGIC)
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    header = json.loads(blob[off:off + n])
    off += n
    segs = {}
    for s in header["segments"]:
        count = int(np.prod(s["shape"]))
        segs[s["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(s["shape"])
        off += 8 * count
    if off != len(blob):
        raise ValueError("trailing bytes in snapshot container")
    arch = PolicyArchitecture(**header["architecture"])
    return PolicySnapshot(ParamVector(segs), arch, header["version"])


def save_snapshot(path, snapshot: PolicySnapshot) -> None:
    Path(path).write_bytes(dumps_snapshot(snapshot))


def load_snapshot(path) -> PolicySnapshot:
    return loads_snapshot(Path(path).read_bytes())
