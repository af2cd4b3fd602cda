"""Tiny conditional sequence models over a shared flat parameter vector.

The workhorse is :class:`TinySeq2Seq`: a mean-of-embeddings encoder feeding a
single tanh recurrent cell, with a linear projection to vocabulary logits.
Everything is float64 numpy with handwritten backprop so that gradients can be
validated against finite differences to tight tolerances.

Distribution contract shared by all models here:

* an output sequence is a tuple of token ids ending in exactly one EOS;
* the last possible position (``max_len - 1``) is forced to EOS with a
  point-mass logit row, so the model is an exactly normalized distribution
  over the finite space of sequences of length <= max_len;
* reserved tokens other than EOS are masked out of the support unless
  explicitly allowed (answer models allow NO_ANSWER).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .vocab import BOS_ID, EOS_ID, N_RESERVED, PAD_ID, Vocab

ParamVector = np.ndarray

# Additive logit for tokens outside the support. Finite, but large enough that
# exp() underflows to an exact 0.0 in float64, keeping normalization exact.
MASK_LOGIT = -1e9


class SequenceError(ValueError):
    pass


class GradientError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log softmax, stable under MASK_LOGIT entries."""
    m = np.max(z, axis=-1, keepdims=True)
    s = np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))
    return z - m - s


def validate_output(output_ids: Sequence[int], max_len: int) -> None:
    if len(output_ids) == 0:
        raise SequenceError("empty output sequence")
    if len(output_ids) > max_len:
        raise SequenceError(f"output length {len(output_ids)} exceeds max_len {max_len}")
    if output_ids[-1] != EOS_ID:
        raise SequenceError("output sequence must end with EOS")
    if EOS_ID in output_ids[:-1]:
        raise SequenceError("EOS may only appear at the end of an output sequence")


class ConditionalSeqModel:
    """Base conditional model p(output | input) over EOS-terminated sequences.

    Subclasses must implement ``next_logits``; batching hooks (``begin`` /
    ``step`` / ``select_rows``) have a generic fallback so scripted reference
    models work with every decoder.
    """

    vocab: Vocab
    max_len: int
    params: ParamVector

    # -- single-position interface -------------------------------------------------

    def next_logits(self, input_ids: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def step_log_probs(self, input_ids: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        return log_softmax(self.next_logits(input_ids, prefix))

    def log_prob(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> float:
        validate_output(output_ids, self.max_len)
        total = 0.0
        for t, tok in enumerate(output_ids):
            total += float(self.step_log_probs(input_ids, output_ids[:t])[tok])
        return total

    def log_prob_many(
        self, inputs: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]
    ) -> np.ndarray:
        return np.array([self.log_prob(i, o) for i, o in zip(inputs, outputs)], dtype=np.float64)

    # -- batched decoding interface ------------------------------------------------

    def begin(self, input_ids: Sequence[int], n_rows: int) -> dict:
        return {"input": tuple(input_ids), "prefixes": [[] for _ in range(n_rows)], "t": 0}

    def step(self, state: dict, prev_tokens: Sequence[int]) -> np.ndarray:
        if state["t"] > 0:
            for pref, tok in zip(state["prefixes"], prev_tokens):
                pref.append(int(tok))
        state["t"] += 1
        return np.stack(
            [self.next_logits(state["input"], pref) for pref in state["prefixes"]]
        )

    def select_rows(self, state: dict, row_indices: Sequence[int]) -> dict:
        return {
            "input": state["input"],
            "prefixes": [list(state["prefixes"][i]) for i in row_indices],
            "t": state["t"],
        }

    # -- gradients -----------------------------------------------------------------

    def grad_log_prob(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> ParamVector:
        raise NotImplementedError

    def grad_weighted_log_prob(
        self,
        inputs: Sequence[Sequence[int]],
        outputs: Sequence[Sequence[int]],
        weights: Sequence[float],
    ) -> tuple[ParamVector, np.ndarray]:
        raise NotImplementedError


class TinySeq2Seq(ConditionalSeqModel):
    """Two-segment pooled encoder + tanh recurrent decoder cell, parameters flat.

    The input is split at the first occurrence of ``split_token`` (the
    prompt/passage boundary marker all templates share): tokens up to and
    including it are mean-pooled into ctx_a, the rest into ctx_b. Without a
    split token both segments pool the whole input. Keeping the segments
    separate lets a pooled encoder express "mentioned in the passage but not
    in the prompt", which a single bag cannot; the multiplicative channel
    ctx_a * ctx_b (elementwise) adds a token-match feature — a word present
    on both sides contributes its squared embedding, so prompt/passage
    agreement is detectable even for words never seen during training.

    Parameter layout (float64, one contiguous vector):

        E     (V, d)   token embeddings, shared by encoder and decoder
        W_h   (d, d)   hidden -> hidden
        W_x   (d, d)   previous-token embedding -> hidden
        W_ca  (d, d)   prompt-segment context -> hidden
        W_cb  (d, d)   passage-segment context -> hidden
        W_m   (d, d)   ctx_a * ctx_b match channel -> hidden
        b_h   (d,)
        W_o   (V, d)   hidden -> logits
        b_o   (V,)

    Step t consumes prev token (BOS at t=0), updates
    h_t = tanh(W_h h_{t-1} + W_x E[prev] + W_ca ctx_a + W_cb ctx_b
    + W_m (ctx_a * ctx_b) + b_h) and emits logits W_o h_t + b_o plus the
    support mask. Position max_len-1 is a forced EOS.
    """

    def __init__(
        self,
        vocab: Vocab,
        dim: int = 32,
        max_len: int = 8,
        allow_tokens: Sequence[str] = (),
        params: ParamVector | None = None,
        seed: int = 0,
        init_scale: float = 0.1,
        split_token: str | None = "context:",
    ):
        if dim < 1 or max_len < 1:
            raise ValueError("dim and max_len must be positive")
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.allow_tokens = tuple(allow_tokens)
        self.split_token = split_token
        self._split_id = (
            vocab.id(split_token) if split_token is not None and split_token in vocab else None
        )
        V, d = len(vocab), dim
        self._shapes = {
            "E": (V, d), "W_h": (d, d), "W_x": (d, d), "W_ca": (d, d), "W_cb": (d, d),
            "W_m": (d, d), "b_h": (d,), "W_o": (V, d), "b_o": (V,),
        }
        self.n_params = sum(int(np.prod(s)) for s in self._shapes.values())
        if params is None:
            rng = np.random.default_rng(seed)
            params = rng.uniform(-init_scale, init_scale, self.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params
        views = {}
        off = 0
        for name, shape in self._shapes.items():
            size = int(np.prod(shape))
            views[name] = self.params[off : off + size].reshape(shape)
            off += size
        self._v = views
        # Support mask: EOS and content tokens generate; other reserved ids are
        # shut out unless explicitly allowed (e.g. NO_ANSWER for answer models).
        allowed = np.zeros(V, dtype=bool)
        allowed[EOS_ID] = True
        allowed[N_RESERVED:] = True
        for tok in self.allow_tokens:
            if tok not in vocab:
                raise ValueError(f"allow_tokens entry not in vocabulary: {tok!r}")
            allowed[vocab.id(tok)] = True
        self._mask = np.where(allowed, 0.0, MASK_LOGIT)
        self._forced = np.full(V, MASK_LOGIT)
        self._forced[EOS_ID] = 0.0

    # -- construction helpers --------------------------------------------------

    def with_params(self, params: ParamVector) -> "TinySeq2Seq":
        return TinySeq2Seq(
            self.vocab, dim=self.dim, max_len=self.max_len,
            allow_tokens=self.allow_tokens, params=params,
            split_token=self.split_token,
        )

    def copy(self) -> "TinySeq2Seq":
        return self.with_params(self.params.copy())

    @property
    def arch(self) -> dict:
        return {
            "type": "tiny_seq2seq",
            "dim": self.dim,
            "max_len": self.max_len,
            "vocab_size": len(self.vocab),
            "allow_tokens": list(self.allow_tokens),
            "split_token": self.split_token,
        }

    # -- forward -----------------------------------------------------------------

    def _segments(self, input_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        if len(input_ids) == 0:
            raise SequenceError("empty input sequence")
        ids = np.asarray(input_ids, dtype=np.intp)
        if self._split_id is not None:
            hits = np.flatnonzero(ids == self._split_id)
            if hits.size and 0 < hits[0] + 1 < len(ids):
                k = int(hits[0]) + 1
                return ids[:k], ids[k:]
        return ids, ids

    def _context(self, input_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        seg_a, seg_b = self._segments(input_ids)
        E = self._v["E"]
        return E[seg_a].mean(axis=0), E[seg_b].mean(axis=0)

    def _cell(
        self, h: np.ndarray, prev: np.ndarray, ctx_a: np.ndarray, ctx_b: np.ndarray
    ) -> np.ndarray:
        v = self._v
        a = (
            h @ v["W_h"].T + v["E"][prev] @ v["W_x"].T
            + ctx_a @ v["W_ca"].T + ctx_b @ v["W_cb"].T
            + (ctx_a * ctx_b) @ v["W_m"].T + v["b_h"]
        )
        return np.tanh(a)

    def _logits(self, h: np.ndarray, t: int) -> np.ndarray:
        if t == self.max_len - 1:
            return np.broadcast_to(self._forced, h.shape[:-1] + self._forced.shape).copy()
        return h @ self._v["W_o"].T + self._v["b_o"] + self._mask

    def next_logits(self, input_ids: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) >= self.max_len:
            raise SequenceError("prefix already at maximum length")
        ctx_a, ctx_b = self._context(input_ids)
        h = np.zeros(self.dim)
        prevs = [BOS_ID, *prefix]
        for tok in prevs:
            h = self._cell(
                h, np.asarray([tok], dtype=np.intp), ctx_a[None, :], ctx_b[None, :]
            )[0]
        return self._logits(h, len(prefix))

    # -- batched scoring / gradient ------------------------------------------------

    def _padded_rows(
        self, inputs: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        n = len(outputs)
        if len(inputs) != n:
            raise ValueError("inputs and outputs must have equal length")
        for out in outputs:
            validate_output(out, self.max_len)
        T = max(len(o) for o in outputs)
        prevs = np.full((n, T), PAD_ID, dtype=np.intp)
        targets = np.full((n, T), PAD_ID, dtype=np.intp)
        active = np.zeros((n, T), dtype=bool)
        ctx_a = np.zeros((n, self.dim))
        ctx_b = np.zeros((n, self.dim))
        for r, (inp, out) in enumerate(zip(inputs, outputs)):
            L = len(out)
            prevs[r, 0] = BOS_ID
            prevs[r, 1:L] = out[:-1]
            targets[r, :L] = out
            active[r, :L] = True
            ctx_a[r], ctx_b[r] = self._context(inp)
        return prevs, targets, active, ctx_a, ctx_b

    def log_prob_many(
        self, inputs: Sequence[Sequence[int]], outputs: Sequence[Sequence[int]]
    ) -> np.ndarray:
        prevs, targets, active, ctx_a, ctx_b = self._padded_rows(inputs, outputs)
        n, T = prevs.shape
        h = np.zeros((n, self.dim))
        total = np.zeros(n)
        rows = np.arange(n)
        for t in range(T):
            h = self._cell(h, prevs[:, t], ctx_a, ctx_b)
            logp = log_softmax(self._logits(h, t))
            total += np.where(active[:, t], logp[rows, targets[:, t]], 0.0)
        return total

    def log_prob(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> float:
        return float(self.log_prob_many([input_ids], [output_ids])[0])

    def grad_weighted_log_prob(
        self,
        inputs: Sequence[Sequence[int]],
        outputs: Sequence[Sequence[int]],
        weights: Sequence[float],
    ) -> tuple[ParamVector, np.ndarray]:
        """Gradient of sum_r weights[r] * log p(outputs[r] | inputs[r]).

        Returns (flat gradient, per-row log probabilities). One shared
        forward/backward pass over the padded batch.
        """
        w = np.asarray(weights, dtype=np.float64)
        prevs, targets, active, ctx_a, ctx_b = self._padded_rows(inputs, outputs)
        n, T = prevs.shape
        if w.shape != (n,):
            raise ValueError("weights must match the number of rows")
        v = self._v
        V, d = len(self.vocab), self.dim

        hs = [np.zeros((n, d))]
        logps = np.zeros(n)
        probs: list[np.ndarray | None] = []
        rows = np.arange(n)
        for t in range(T):
            h = self._cell(hs[-1], prevs[:, t], ctx_a, ctx_b)
            hs.append(h)
            z = self._logits(h, t)
            lp = log_softmax(z)
            logps += np.where(active[:, t], lp[rows, targets[:, t]], 0.0)
            # Forced EOS row is constant in the parameters: no gradient flows.
            probs.append(None if t == self.max_len - 1 else np.exp(lp))

        gE = np.zeros((V, d)); gWh = np.zeros((d, d)); gWx = np.zeros((d, d))
        gWca = np.zeros((d, d)); gWcb = np.zeros((d, d)); gWm = np.zeros((d, d))
        gbh = np.zeros(d); gWo = np.zeros((V, d)); gbo = np.zeros(V)
        prod = ctx_a * ctx_b
        dctx_a = np.zeros((n, d))
        dctx_b = np.zeros((n, d))
        da_next = np.zeros((n, d))
        for t in range(T - 1, -1, -1):
            h_t, h_prev = hs[t + 1], hs[t]
            if probs[t] is None:
                dh = da_next @ v["W_h"]
            else:
                dz = -probs[t] * (w * active[:, t])[:, None]
                dz[rows, targets[:, t]] += w * active[:, t]
                gWo += dz.T @ h_t
                gbo += dz.sum(axis=0)
                dh = dz @ v["W_o"] + da_next @ v["W_h"]
            da = dh * (1.0 - h_t * h_t)
            gWh += da.T @ h_prev
            x = v["E"][prevs[:, t]]
            gWx += da.T @ x
            gWca += da.T @ ctx_a
            gWcb += da.T @ ctx_b
            gWm += da.T @ prod
            gbh += da.sum(axis=0)
            np.add.at(gE, prevs[:, t], da @ v["W_x"])
            dprod = da @ v["W_m"]
            dctx_a += da @ v["W_ca"] + dprod * ctx_b
            dctx_b += da @ v["W_cb"] + dprod * ctx_a
            da_next = da
        for r, inp in enumerate(inputs):
            seg_a, seg_b = self._segments(inp)
            np.add.at(gE, seg_a, np.broadcast_to(dctx_a[r] / len(seg_a), (len(seg_a), d)))
            np.add.at(gE, seg_b, np.broadcast_to(dctx_b[r] / len(seg_b), (len(seg_b), d)))

        grad = np.concatenate(
            [gE.ravel(), gWh.ravel(), gWx.ravel(), gWca.ravel(), gWcb.ravel(),
             gWm.ravel(), gbh, gWo.ravel(), gbo]
        )
        return grad, logps

    def grad_log_prob(self, input_ids: Sequence[int], output_ids: Sequence[int]) -> ParamVector:
        grad, _ = self.grad_weighted_log_prob([input_ids], [output_ids], [1.0])
        return grad

    # -- batched decoding --------------------------------------------------------

    def begin(self, input_ids: Sequence[int], n_rows: int) -> dict:
        ctx_a, ctx_b = self._context(input_ids)
        return {
            "h": np.zeros((n_rows, self.dim)),
            "ctx_a": np.broadcast_to(ctx_a, (n_rows, self.dim)),
            "ctx_b": np.broadcast_to(ctx_b, (n_rows, self.dim)),
            "t": 0,
        }

    def step(self, state: dict, prev_tokens: Sequence[int]) -> np.ndarray:
        prev = np.asarray(prev_tokens, dtype=np.intp)
        state["h"] = self._cell(state["h"], prev, state["ctx_a"], state["ctx_b"])
        t = state["t"]
        state["t"] = t + 1
        return self._logits(state["h"], t)

    def select_rows(self, state: dict, row_indices: Sequence[int]) -> dict:
        idx = np.asarray(row_indices, dtype=np.intp)
        return {
            "h": state["h"][idx].copy(),
            "ctx_a": state["ctx_a"][idx],
            "ctx_b": state["ctx_b"][idx],
            "t": state["t"],
        }


class ScriptedSeqModel(ConditionalSeqModel):
    """Deterministic reference model driven by a user-supplied rule.

    ``rule(input_ids, prefix)`` returns either a token id (point mass on that
    token) or a full logits vector. Useful as an independent oracle when
    testing decoders and pipeline plumbing; it has no trainable parameters.
    """

    def __init__(self, vocab: Vocab, rule: Callable, max_len: int = 8):
        self.vocab = vocab
        self.max_len = max_len
        self.rule = rule
        self.params = np.zeros(0)

    def next_logits(self, input_ids: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        if len(prefix) >= self.max_len:
            raise SequenceError("prefix already at maximum length")
        if len(prefix) == self.max_len - 1:
            out = EOS_ID
        else:
            out = self.rule(tuple(input_ids), tuple(prefix))
        if np.ndim(out) == 0:
            z = np.full(len(self.vocab), MASK_LOGIT)
            z[int(out)] = 0.0
            return z
        z = np.asarray(out, dtype=np.float64)
        if z.shape != (len(self.vocab),):
            raise ValueError("rule must return a token id or a full logits vector")
        return z

    def grad_log_prob(self, input_ids, output_ids) -> ParamVector:
        return np.zeros(0)

    def grad_weighted_log_prob(self, inputs, outputs, weights):
        return np.zeros(0), self.log_prob_many(inputs, outputs)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """One gradient-ascent step on the log objective: params + lr * grad."""
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise GradientError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite gradient")
    return params + lr * grad


def save_checkpoint(model: TinySeq2Seq, path: str | Path) -> None:
    payload = {
        "format": "latentq-checkpoint",
        "layout_version": 1,
        "arch": model.arch,
        "params": model.params.tolist(),
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path, vocab: Vocab) -> TinySeq2Seq:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "latentq-checkpoint":
        raise CheckpointError(f"not a checkpoint file: {path}")
    if payload.get("layout_version") != 1:
        raise CheckpointError(f"unsupported layout_version: {payload.get('layout_version')}")
    arch = payload["arch"]
    if arch.get("type") != "tiny_seq2seq":
        raise CheckpointError(f"unknown model type: {arch.get('type')}")
    if arch["vocab_size"] != len(vocab):
        raise CheckpointError(
            f"vocabulary size mismatch: checkpoint {arch['vocab_size']}, vocab {len(vocab)}"
        )
    try:
        return TinySeq2Seq(
            vocab,
            dim=arch["dim"],
            max_len=arch["max_len"],
            allow_tokens=arch.get("allow_tokens", ()),
            params=np.array(payload["params"], dtype=np.float64),
            split_token=arch.get("split_token"),
        )
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}")
