"""Chunked PPO search loop over the strategy environment.

Episodes have length one: the policy proposes a strategy, the environment
scores it, done. The observation is the elite buffer, which evolves as a
side effect of good proposals, so the advantage is simply reward minus the
critic's estimate, with no discounting or bootstrapping.

The evaluation budget is split into equal chunks. Within a chunk the policy
trains under a cosine learning-rate schedule; when every sub-action head is
confident (max probability >= tau), the chunk exits early and its unspent
evaluations roll into the next chunk's allowance. Each new chunk restarts
from freshly initialized parameters and a fresh optimizer while keeping the
environment's best-so-far baseline and the elite buffer, so later agents
exploit everything earlier agents learned about the space. Leftover budget
after the last scheduled chunk funds additional restarts, so one search
always spends its budget exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .env import EvalRecord, SearchEnv
from .policy import (
    EliteBuffer,
    NumericsError,
    PolicyNetwork,
    build_observation,
    confidence,
    masked_log_softmax,
)
from .strategy import canonical_fused_ops


@dataclass(frozen=True)
class PpoConfig:
    """Hyperparameters of the chunked PPO search."""

    budget: int = 4000
    chunks: int = 5
    n_steps: int = 2  # rollout buffer size; one update per rollout
    epochs_per_update: int = 2
    lr_initial: float = 1e-3
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    tau: float = 0.95
    history_len: int = 3
    width: int = 256
    ffn_width: int = 256

    def __post_init__(self) -> None:
        positive = {
            "budget": self.budget,
            "chunks": self.chunks,
            "n_steps": self.n_steps,
            "epochs_per_update": self.epochs_per_update,
            "lr_initial": self.lr_initial,
            "clip_eps": self.clip_eps,
            "tau": self.tau,
            "history_len": self.history_len,
            "width": self.width,
            "ffn_width": self.ffn_width,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"ppo.{name} must be positive, got {value}")
        for name, value in (
            ("value_coef", self.value_coef),
            ("entropy_coef", self.entropy_coef),
        ):
            if value < 0:
                raise ValueError(f"ppo.{name} must be non-negative, got {value}")
        if self.budget % self.chunks != 0:
            raise ValueError(
                f"ppo.chunks ({self.chunks}) must divide ppo.budget ({self.budget})"
            )


@dataclass(frozen=True)
class RolloutSample:
    """One on-policy step: what was seen, done, and scored."""

    obs: np.ndarray
    action: tuple[int, ...]
    logprob_old: float
    reward: float
    value_old: float


@dataclass(frozen=True)
class RolloutBatch:
    samples: tuple[RolloutSample, ...]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class LossReport:
    """Diagnostics of one optimization epoch."""

    policy_loss: float
    value_loss: float
    entropy: float
    total_loss: float
    lr: float
    clip_fraction: float
    mean_ratio: float


class ChunkExit(str, Enum):
    EXHAUSTED = "exhausted"
    EARLY_EXIT = "early_exit"


@dataclass(frozen=True)
class ChunkOutcome:
    exit: ChunkExit
    evals_used: int


class Adam:
    """Adam with bias correction; learning rate supplied per apply call."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t) for name, t in params.items()}
        self._v = {name: np.zeros_like(t) for name, t in params.items()}

    def apply(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, grad in grads.items():
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            step = lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            params[name] = params[name] - step


def cosine_decay(initial: float, progress: float) -> float:
    """Cosine decay from ``initial`` at progress 0 to exactly 0 at progress 1."""
    clamped = min(max(progress, 0.0), 1.0)
    return initial * 0.5 * (1.0 + math.cos(math.pi * clamped))


def collect(
    env: SearchEnv,
    policy: PolicyNetwork,
    buf: EliteBuffer,
    n: int,
    rng: np.random.Generator,
) -> RolloutBatch:
    """Run ``n`` one-step episodes under the current policy.

    Valid strategies are offered to the elite buffer with the reward they
    earned; invalid ones stay in the batch (the penalty is signal) but never
    become elites. BudgetExhausted propagates and discards the partial batch.
    """
    samples = []
    for _ in range(n):
        obs = build_observation(buf, policy.space)
        out = policy.forward(obs)
        action, logprob, _ = policy.sample(out, rng)
        reward, _, valid = env.step(action)
        if valid:
            buf.offer(action, reward)
        samples.append(
            RolloutSample(
                obs=obs,
                action=action,
                logprob_old=logprob,
                reward=reward,
                value_old=out.value,
            )
        )
    return RolloutBatch(samples=tuple(samples))


def loss_and_grads(
    policy: PolicyNetwork, batch: RolloutBatch, cfg: PpoConfig
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Clipped-surrogate PPO loss and its exact parameter gradients.

    Loss per sample, advantage A = reward - value_old:
        -min(rho * A, clip(rho, 1 +- eps) * A)
        + value_coef * (value - reward)^2
        - entropy_coef * sum_m H(p_m)
    averaged over the batch. rho multiplies per-head probabilities, i.e. it
    exponentiates the summed log-probs.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty rollout batch")
    grads: dict[str, np.ndarray] | None = None
    policy_loss = 0.0
    value_loss = 0.0
    entropy_total = 0.0
    clipped = 0
    ratio_sum = 0.0

    for sample in batch.samples:
        if not (
            math.isfinite(sample.reward)
            and math.isfinite(sample.value_old)
            and math.isfinite(sample.logprob_old)
        ):
            raise NumericsError(f"non-finite rollout sample: {sample}")
        out, cache = policy.forward_cached(sample.obs)
        advantage = sample.reward - sample.value_old

        logprob_new = 0.0
        per_head: list[tuple[np.ndarray, np.ndarray, float]] = []
        entropy = 0.0
        for head, idx in zip(out.logits, sample.action):
            log_probs, probs = masked_log_softmax(head)
            logprob_new += float(log_probs[idx])
            head_entropy = float(-np.sum(probs * log_probs))
            entropy += head_entropy
            per_head.append((log_probs, probs, head_entropy))

        ratio = math.exp(logprob_new - sample.logprob_old)
        unclipped = ratio * advantage
        clip_lo, clip_hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
        clamped = min(max(ratio, clip_lo), clip_hi) * advantage
        surrogate = min(unclipped, clamped)
        # The unclipped branch carries the gradient whenever it attains the
        # min; outside the clip band the clamped branch is constant in rho.
        d_ratio = -advantage / n if unclipped <= clamped else 0.0
        if not (clip_lo < ratio < clip_hi):
            clipped += 1
        ratio_sum += ratio

        value_err = out.value - sample.reward
        policy_loss += -surrogate / n
        value_loss += cfg.value_coef * value_err * value_err / n
        entropy_total += entropy / n

        d_value = 2.0 * cfg.value_coef * value_err / n
        d_logprob = d_ratio * ratio
        d_logits = []
        for (log_probs, probs, head_entropy), idx in zip(per_head, sample.action):
            one_hot = np.zeros_like(probs)
            one_hot[idx] = 1.0
            d_head = d_logprob * (one_hot - probs)
            # d(-coef * H)/d logit_j = coef * p_j (log p_j + H); masked
            # entries contribute exactly zero because p_j = 0 there.
            d_head += cfg.entropy_coef * probs * (log_probs + head_entropy) / n
            d_logits.append(d_head)

        sample_grads = policy.backward(cache, d_logits, d_value)
        if grads is None:
            grads = sample_grads
        else:
            for name, grad in sample_grads.items():
                grads[name] += grad

    total = policy_loss + value_loss - cfg.entropy_coef * entropy_total
    if not math.isfinite(total):
        raise NumericsError(f"non-finite loss: {total}")
    report = LossReport(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=entropy_total,
        total_loss=total,
        lr=float("nan"),  # filled in by ppo_update
        clip_fraction=clipped / n,
        mean_ratio=ratio_sum / n,
    )
    assert grads is not None
    return report, grads


def ppo_update(
    policy: PolicyNetwork,
    batch: RolloutBatch,
    cfg: PpoConfig,
    lr: float,
    optimizer: Adam,
) -> tuple[LossReport, ...]:
    """Run ``epochs_per_update`` gradient steps on one batch.

    Later epochs recompute probabilities under moved parameters, so the
    ratio leaves 1 and clipping becomes active. Parameters are verified
    finite after every step; a non-finite update is a training bug and
    aborts the run.
    """
    reports = []
    for _ in range(cfg.epochs_per_update):
        report, grads = loss_and_grads(policy, batch, cfg)
        optimizer.apply(policy.params, grads, lr)
        policy.check_finite()
        reports.append(
            LossReport(
                policy_loss=report.policy_loss,
                value_loss=report.value_loss,
                entropy=report.entropy,
                total_loss=report.total_loss,
                lr=lr,
                clip_fraction=report.clip_fraction,
                mean_ratio=report.mean_ratio,
            )
        )
    return tuple(reports)


def run_chunk(
    env: SearchEnv,
    policy: PolicyNetwork,
    buf: EliteBuffer,
    allowance: int,
    cfg: PpoConfig,
    rng: np.random.Generator,
    optimizer: Adam | None = None,
) -> ChunkOutcome:
    """Train one fresh agent until its allowance is spent or it is confident.

    The confidence check runs after every update on the observation built
    from the current elite buffer; single-choice heads are confident by
    construction (their max probability is 1).
    """
    if allowance < 1:
        raise ValueError("chunk allowance must be >= 1")
    if optimizer is None:
        optimizer = Adam(policy.params)
    spent = 0
    while spent < allowance:
        n = min(cfg.n_steps, allowance - spent)
        lr = cosine_decay(cfg.lr_initial, spent / allowance)
        batch = collect(env, policy, buf, n, rng)
        spent += len(batch)
        ppo_update(policy, batch, cfg, lr, optimizer)
        out = policy.forward(build_observation(buf, policy.space))
        if bool(np.all(confidence(out) >= cfg.tau)):
            return ChunkOutcome(exit=ChunkExit.EARLY_EXIT, evals_used=spent)
    return ChunkOutcome(exit=ChunkExit.EXHAUSTED, evals_used=spent)


@dataclass(frozen=True)
class SearchReport:
    """Outcome of one search run, fully reconstructable from the eval log."""

    algorithm: str
    seed: int | None
    budget: int
    evals: int
    best_vector: tuple[int, ...]
    best_raw: float
    best_reward: float
    best_valid: bool
    restarts: tuple[int, ...]
    rewards: tuple[float, ...]
    raws: tuple[float, ...]
    wall_clock_s: float

    def best_so_far_raw(self) -> tuple[float, ...]:
        """Running maximum of raw throughput; invalid evals score 0."""
        best = 0.0
        curve = []
        for raw in self.raws:
            best = max(best, raw)
            curve.append(best)
        return tuple(curve)

    def to_json(self) -> str:
        payload = {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "budget": self.budget,
            "evals": self.evals,
            "best_vector": list(self.best_vector),
            "best_raw": self.best_raw,
            "best_reward": self.best_reward,
            "best_valid": self.best_valid,
            "restarts": list(self.restarts),
            "rewards": list(self.rewards),
            "raws": list(self.raws),
            "wall_clock_s": self.wall_clock_s,
        }
        return json.dumps(payload)

    @staticmethod
    def from_json(text: str) -> "SearchReport":
        payload = json.loads(text)
        return SearchReport(
            algorithm=payload["algorithm"],
            seed=payload["seed"],
            budget=payload["budget"],
            evals=payload["evals"],
            best_vector=tuple(payload["best_vector"]),
            best_raw=payload["best_raw"],
            best_reward=payload["best_reward"],
            best_valid=payload["best_valid"],
            restarts=tuple(payload["restarts"]),
            rewards=tuple(payload["rewards"]),
            raws=tuple(payload["raws"]),
            wall_clock_s=payload["wall_clock_s"],
        )


def build_report(
    algorithm: str,
    seed: int | None,
    records: Sequence[EvalRecord],
    restarts: Sequence[int],
    budget: int,
    wall_clock_s: float,
    by_raw: bool = False,
) -> SearchReport:
    """Summarize an eval-record stream; earliest record wins ties.

    ``by_raw`` selects the winner by raw throughput over valid records only
    (the exhaustive baseline's rule); the default selects by reward, the
    signal the learning searches optimize.
    """
    if not records:
        raise ValueError("cannot report on zero evaluations")
    best = None
    for record in records:
        if by_raw and not record.valid:
            continue
        key = record.raw if by_raw else record.reward
        if best is None or key > (best.raw if by_raw else best.reward):
            best = record
    if best is None:
        best = records[0]  # nothing valid; report the first penalty record
    return SearchReport(
        algorithm=algorithm,
        seed=seed,
        budget=budget,
        evals=len(records),
        best_vector=best.vector,
        best_raw=best.raw,
        best_reward=best.reward,
        best_valid=best.valid,
        restarts=tuple(restarts),
        rewards=tuple(r.reward for r in records),
        raws=tuple(r.raw for r in records),
        wall_clock_s=wall_clock_s,
    )


def run_search(env: SearchEnv, cfg: PpoConfig, seed: int) -> SearchReport:
    """Full chunked-restart PPO search; consumes exactly ``cfg.budget`` evals.

    The environment must have at least ``cfg.budget`` evaluations left. One
    seeded generator drives parameter initialization and action sampling, so
    a run is a pure function of (env inputs, cfg, seed); successive restarts
    draw from later stream positions and are therefore independent.
    """
    if env.budget_left < cfg.budget:
        raise ValueError(
            f"environment has {env.budget_left} evals left, need {cfg.budget}"
        )
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    ops = canonical_fused_ops(env.model)
    buf = EliteBuffer(cfg.history_len)
    first_record = env.evals_used

    restarts: list[int] = []
    evals_done = 0
    carry = 0
    chunk_budget = cfg.budget // cfg.chunks
    schedule = [chunk_budget] * cfg.chunks
    for base_allowance in schedule:
        allowance = base_allowance + carry
        policy = PolicyNetwork(
            env.space,
            ops,
            rng=rng,
            history_len=cfg.history_len,
            width=cfg.width,
            ffn_width=cfg.ffn_width,
        )
        restarts.append(evals_done)
        outcome = run_chunk(env, policy, buf, allowance, cfg, rng)
        evals_done += outcome.evals_used
        carry = allowance - outcome.evals_used
    # An early exit in the last scheduled chunk leaves budget on the table;
    # spend it with additional restarts so total evals always equal budget.
    while carry > 0:
        allowance = carry
        policy = PolicyNetwork(
            env.space,
            ops,
            rng=rng,
            history_len=cfg.history_len,
            width=cfg.width,
            ffn_width=cfg.ffn_width,
        )
        restarts.append(evals_done)
        outcome = run_chunk(env, policy, buf, allowance, cfg, rng)
        evals_done += outcome.evals_used
        carry = allowance - outcome.evals_used

    records = env.eval_log[first_record : first_record + evals_done]
    return build_report(
        algorithm="ppo",
        seed=seed,
        records=records,
        restarts=restarts,
        budget=cfg.budget,
        wall_clock_s=time.perf_counter() - start,
    )
