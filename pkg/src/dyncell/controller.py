"""Two-layer LSTM policy over genotype tokens, trained with clipped PPO.

Tokens are emitted autoregressively in the fixed per-step order
(in1, in2, op1, op2, agg). The index head is sized to the final sampling
pool and masked per step, so every emitted string decodes to a valid
genotype by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .checkpoint import load_arrays, save_arrays
from .genotype import (N_AGGS, N_INPUT_SLOTS, N_OPS, TOKENS_PER_STEP,
                       GenotypeError)
from .optim import Adam

MASK_VALUE = -1e9  # exp() underflows to exactly zero probability


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    lr: float = 1e-4
    epochs_per_batch: int = 3
    entropy_coef: float = 1e-3
    baseline_decay: float = 0.9
    batch_size: int = 8

    def validate(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError(f"clip_eps {self.clip_eps} outside (0,1)")
        if self.lr <= 0:
            raise ValueError(f"lr {self.lr} must be positive")


@dataclass
class SampleTrace:
    tokens: list[int]
    logprobs: list[float]
    entropies: list[float]
    reward: float | None = None

    def total_logprob(self) -> float:
        return float(sum(self.logprobs))


def _position_kind(position: int) -> str:
    slot = position % TOKENS_PER_STEP
    return "index" if slot < 2 else ("op" if slot < 4 else "agg")


class Controller:
    """The sampling policy: embeddings, two LSTM layers, three heads."""

    HIDDEN = 100
    EMBED = 32
    INIT_RANGE = 0.1

    def __init__(self, depth: int, seed: int = 0):
        if depth < 1:
            raise GenotypeError(f"depth {depth} < 1")
        self.depth = depth
        self.max_pool = N_INPUT_SLOTS + depth - 1
        rng = np.random.default_rng(seed)
        h, e = self.HIDDEN, self.EMBED

        def u(*shape):
            return Parameter(rng.uniform(-self.INIT_RANGE, self.INIT_RANGE,
                                         shape))

        self.emb_start = u(1, e)
        self.emb_index = u(self.max_pool, e)
        self.emb_op = u(N_OPS, e)
        self.emb_agg = u(N_AGGS, e)
        self.lstm = [
            {"wx": u(e, 4 * h), "wh": u(h, 4 * h), "b": u(4 * h)},
            {"wx": u(h, 4 * h), "wh": u(h, 4 * h), "b": u(4 * h)},
        ]
        self.head_w = {"index": u(h, self.max_pool), "op": u(h, N_OPS),
                       "agg": u(h, N_AGGS)}
        self.head_b = {"index": u(self.max_pool), "op": u(N_OPS),
                       "agg": u(N_AGGS)}
        self._emb = {"index": self.emb_index, "op": self.emb_op,
                     "agg": self.emb_agg}
        self.baseline: float | None = None
        self._opt = None

    def parameters(self) -> list[Parameter]:
        out = [self.emb_start, self.emb_index, self.emb_op, self.emb_agg]
        for layer in self.lstm:
            out += [layer["wx"], layer["wh"], layer["b"]]
        for kind in ("index", "op", "agg"):
            out += [self.head_w[kind], self.head_b[kind]]
        return out

    def _lstm_step(self, x, state):
        h = self.HIDDEN
        new_state = []
        for layer, (hs, cs) in zip(self.lstm, state):
            z = ag.add(ag.add(ag.matmul(x, layer["wx"]),
                              ag.matmul(hs, layer["wh"])), layer["b"])
            i = ag.sigmoid(ag.narrow(z, 1, 0, h))
            f = ag.sigmoid(ag.narrow(z, 1, h, h))
            g = ag.tanh(ag.narrow(z, 1, 2 * h, h))
            o = ag.sigmoid(ag.narrow(z, 1, 3 * h, h))
            c2 = ag.add(ag.mul(f, cs), ag.mul(i, g))
            h2 = ag.mul(o, ag.tanh(c2))
            new_state.append((h2, c2))
            x = h2
        return x, new_state

    def _index_mask(self, step: int) -> Tensor:
        mask = np.zeros((1, self.max_pool))
        mask[0, N_INPUT_SLOTS + step:] = MASK_VALUE
        return Tensor(mask)

    def _head_logp(self, h, position: int):
        kind = _position_kind(position)
        logits = ag.add(ag.matmul(h, self.head_w[kind]), self.head_b[kind])
        if kind == "index":
            logits = ag.add(logits, self._index_mask(position // TOKENS_PER_STEP))
        return ag.log_softmax(logits, axis=1), kind

    def _walk(self, pick):
        """Run the autoregressive chain; ``pick(position, logp)`` returns the
        token to follow. Yields graph tensors for each position."""
        zero = Tensor(np.zeros((1, self.HIDDEN)))
        state = [(zero, zero), (zero, zero)]
        x = self.emb_start
        results = []
        for position in range(TOKENS_PER_STEP * self.depth):
            h, state = self._lstm_step(x, state)
            logp, kind = self._head_logp(h, position)
            token = pick(position, logp)
            token_lp = ag.narrow(logp, 1, token, 1)
            p = ag.exp(logp)
            entropy = ag.scale(ag.tsum(ag.mul(p, logp)), -1.0)
            results.append((token, token_lp, entropy))
            x = ag.narrow(self._emb[kind], 0, token, 1)
        return results

    def sample(self, rng: np.random.Generator) -> SampleTrace:
        """Draw one token string; probabilities masked per-step pool."""
        def pick(position, logp):
            p = np.exp(logp.data[0])
            return int(rng.choice(p.size, p=p / p.sum()))

        with ag.no_grad():
            results = self._walk(pick)
        return SampleTrace(
            tokens=[t for t, _, _ in results],
            logprobs=[lp.item() for _, lp, _ in results],
            entropies=[e.item() for _, _, e in results])

    def _validate_tokens(self, tokens):
        if len(tokens) != TOKENS_PER_STEP * self.depth:
            raise GenotypeError(
                f"token string length {len(tokens)} != "
                f"{TOKENS_PER_STEP * self.depth}")
        for position, token in enumerate(tokens):
            kind = _position_kind(position)
            bound = {"index": N_INPUT_SLOTS + position // TOKENS_PER_STEP,
                     "op": N_OPS, "agg": N_AGGS}[kind]
            if not 0 <= token < bound:
                raise GenotypeError(
                    f"position {position} token {token} out of range "
                    f"[0,{bound})")

    def _forced(self, tokens):
        """Teacher-forced pass; returns (total logprob, mean entropy) tensors."""
        self._validate_tokens(tokens)
        results = self._walk(lambda pos, logp: tokens[pos])
        total = None
        ent = None
        for _, lp, e in results:
            total = lp if total is None else ag.add(total, lp)
            ent = e if ent is None else ag.add(ent, e)
        return (ag.tsum(total), ag.scale(ent, 1.0 / len(results)))

    def log_prob(self, tokens: list[int]):
        """Recomputed (total, per-token) log-probabilities of a string."""
        self._validate_tokens(tokens)
        with ag.no_grad():
            results = self._walk(lambda pos, logp: tokens[pos])
        per_token = [lp.item() for _, lp, _ in results]
        return float(sum(per_token)), per_token

    # -- PPO ---------------------------------------------------------------

    def _objective(self, traces, advantages, old_logprobs, cfg: PpoConfig):
        """Mean clipped surrogate plus entropy bonus (to be maximized)."""
        terms = []
        for trace, adv, old_lp in zip(traces, advantages, old_logprobs):
            total_lp, entropy = self._forced(trace.tokens)
            ratio = ag.exp(ag.add(total_lp, Tensor(np.array(-old_lp))))
            unclipped = ag.scale(ratio, adv)
            clipped = ag.scale(ag.clip(ratio, 1 - cfg.clip_eps,
                                       1 + cfg.clip_eps), adv)
            surrogate = ag.minimum(unclipped, clipped)
            terms.append(ag.add(surrogate,
                                ag.scale(entropy, cfg.entropy_coef)))
        total = terms[0]
        for t in terms[1:]:
            total = ag.add(total, t)
        return ag.scale(total, 1.0 / len(terms))

    def ppo_update(self, traces: list[SampleTrace], cfg: PpoConfig) -> float:
        """One batch update; returns the refreshed reward baseline."""
        cfg.validate()
        if not traces:
            raise ValueError("ppo_update: empty batch")
        if any(t.reward is None for t in traces):
            raise ValueError("ppo_update: trace without reward")
        if self._opt is None:
            self._opt = Adam(self.parameters(), cfg.lr)
        self._opt.lr = cfg.lr
        rewards = [t.reward for t in traces]
        if self.baseline is None:
            self.baseline = float(np.mean(rewards))
        advantages = [r - self.baseline for r in rewards]
        old_logprobs = [t.total_logprob() for t in traces]
        for _ in range(cfg.epochs_per_batch):
            objective = self._objective(traces, advantages, old_logprobs, cfg)
            loss = ag.scale(objective, -1.0)
            self._opt.zero_grad()
            loss.backward()
            self._opt.step()
        self.baseline = (cfg.baseline_decay * self.baseline
                         + (1 - cfg.baseline_decay) * float(np.mean(rewards)))
        return self.baseline


def save_controller(path, controller: Controller):
    save_arrays(path, "controller",
                [p.data for p in controller.parameters()],
                {"depth": controller.depth,
                 "baseline": controller.baseline})


def load_controller(path) -> Controller:
    arrays, meta = load_arrays(path, "controller")
    ctrl = Controller(depth=int(meta["depth"]))
    params = ctrl.parameters()
    if len(params) != len(arrays):
        raise ValueError("controller checkpoint parameter count mismatch")
    for p, a in zip(params, arrays):
        p.data = a.astype(np.float64).copy()
    ctrl.baseline = meta["baseline"]
    return ctrl
