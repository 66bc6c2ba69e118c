"""One-step decision environment wrapping the simulator.

Every ``step`` scores one encoded strategy: decode, simulate, shape the
reward, account the budget. Rewards combine the raw objective with an
improvement bonus against the best raw value seen so far (exclusive of the
current sample),

    reward = alpha * raw + beta * (raw - best_so_far)

while invalid strategies earn a flat configured penalty and still consume
budget. The environment is the single bookkeeper of the run: every
evaluation lands in an append-only log that fully reproduces the search.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, TextIO

from .model import HardwareSpec, ModelSpec
from .simulator import SimRequest, simulate
from .strategy import ActionSpaceSpec, Strategy, decode_strategy


class BudgetExhausted(RuntimeError):
    """All simulator calls of the run's budget have been spent."""


class NoEvaluations(RuntimeError):
    """Selection requested before any strategy was evaluated."""


@dataclass(frozen=True)
class RewardConfig:
    """Shaping knobs: scale factors and the flat penalty for invalid picks."""

    alpha: float = 1.0
    beta: float = 1.0
    invalid_penalty: float = -10.0

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"reward.alpha must be positive, got {self.alpha}")
        if not self.beta > 0:
            raise ValueError(f"reward.beta must be positive, got {self.beta}")
        if not self.invalid_penalty < 0:
            raise ValueError(
                f"reward.invalid_penalty must be negative, got {self.invalid_penalty}"
            )


@dataclass(frozen=True)
class EvalRecord:
    """One logged evaluation, exactly as the search saw it."""

    index: int
    vector: tuple[int, ...]
    raw: float
    reward: float
    valid: bool
    reason: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "index": self.index,
                "vector": list(self.vector),
                "raw": self.raw,
                "reward": self.reward,
                "valid": self.valid,
                "reason": self.reason,
            }
        )

    @staticmethod
    def from_json(line: str) -> "EvalRecord":
        d = json.loads(line)
        return EvalRecord(
            index=d["index"],
            vector=tuple(d["vector"]),
            raw=d["raw"],
            reward=d["reward"],
            valid=d["valid"],
            reason=d["reason"],
        )


class SearchEnv:
    """Budgeted strategy-evaluation environment over one workload.

    Single-writer: exactly one search loop owns an instance. When
    ``log_path`` is given, every record is appended and flushed immediately
    so an interrupted run still leaves a valid, replayable log.
    """

    def __init__(
        self,
        model: ModelSpec,
        hw: HardwareSpec,
        space: ActionSpaceSpec,
        context_len: int,
        budget: int,
        reward: RewardConfig = RewardConfig(),
        slo_tpot: float = 0.050,
        log_path: str | Path | None = None,
    ) -> None:
        if budget < 1:
            raise ValueError(f"budget must be positive, got {budget}")
        self.model = model
        self.hw = hw
        self.space = space
        self.context_len = context_len
        self.slo_tpot = slo_tpot
        self.budget = budget
        self.reward_cfg = reward
        self.best_raw = 0.0
        self.evals_used = 0
        self.eval_log: list[EvalRecord] = []
        self._sink: TextIO | None = None
        if log_path is not None:
            self._sink = open(log_path, "a", encoding="utf-8")

    def close(self) -> None:
        if self._sink is not None:
            self._sink.close()
            self._sink = None

    def __enter__(self) -> "SearchEnv":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def budget_left(self) -> int:
        return self.budget - self.evals_used

    def evaluate_raw(self, strategy: Strategy):
        """Simulator verdict for a strategy, without touching env state."""
        return simulate(
            SimRequest(
                model=self.model,
                hw=self.hw,
                strategy=strategy,
                context_len=self.context_len,
                slo_tpot=self.slo_tpot,
            )
        )

    def step(self, action: Sequence[int]) -> tuple[float, float, bool]:
        """Evaluate one encoded strategy; returns (reward, raw, valid)."""
        if self.evals_used >= self.budget:
            raise BudgetExhausted(f"budget of {self.budget} evaluations spent")
        vector = tuple(int(a) for a in action)
        strategy = decode_strategy(vector, self.space)
        result = self.evaluate_raw(strategy)
        if result.valid:
            raw = result.throughput
            reward = self.reward_cfg.alpha * raw + self.reward_cfg.beta * (raw - self.best_raw)
        else:
            raw = 0.0
            reward = self.reward_cfg.invalid_penalty
        record = EvalRecord(
            index=self.evals_used,
            vector=vector,
            raw=raw,
            reward=reward,
            valid=result.valid,
            reason=result.invalid_reason.value,
        )
        self.evals_used += 1
        self.eval_log.append(record)
        if self._sink is not None:
            self._sink.write(record.to_json() + "\n")
            self._sink.flush()
        if result.valid and raw > self.best_raw:
            self.best_raw = raw  # after reward computation: bonus is exclusive
        return reward, raw, result.valid

    def final_selection(self) -> tuple[Strategy, EvalRecord]:
        """Highest-reward evaluation, earliest wins ties.

        When nothing was valid this still returns the least-bad record so the
        caller can report what happened; check ``record.valid``.
        """
        if not self.eval_log:
            raise NoEvaluations("no strategies were evaluated")
        best = self.eval_log[0]
        for record in self.eval_log[1:]:
            if record.reward > best.reward:
                best = record
        return decode_strategy(best.vector, self.space), best


def load_eval_log(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(EvalRecord.from_json(line))
    return records


def replay_eval_log(
    records: Sequence[EvalRecord],
    model: ModelSpec,
    hw: HardwareSpec,
    space: ActionSpaceSpec,
    context_len: int,
    slo_tpot: float = 0.050,
) -> Iterator[tuple[EvalRecord, float]]:
    """Re-simulate each logged vector, yielding (record, recomputed raw).

    The simulator is deterministic, so any mismatch means the log does not
    belong to this workload configuration.
    """
    for record in records:
        strategy = decode_strategy(record.vector, space)
        result = simulate(
            SimRequest(
                model=model,
                hw=hw,
                strategy=strategy,
                context_len=context_len,
                slo_tpot=slo_tpot,
            )
        )
        yield record, (result.throughput if result.valid else 0.0)
