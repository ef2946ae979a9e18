"""Structured episode reward and the soft VQA accuracy used for curation.

The composite reward is alpha * correctness + beta * format + gamma * tool
success rate, where correctness blends an exact-match term with a soft term
derived from normalized edit distance to the closest references.
"""

from __future__ import annotations

from dataclasses import dataclass

from .protocol import FormatVerdict

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.0
DEFAULT_GAMMA = 0.1
DEFAULT_LAMBDA = 0.5

EDIT_REWARD_TOP_K = 3
VQA_CONSENSUS = 3


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "gamma", "lam"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value != value:
                raise ValueError(f"weight {name} must be a finite number")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")

    @property
    def total_max(self) -> float:
        return self.alpha + self.beta + self.gamma


@dataclass(frozen=True)
class RewardBreakdown:
    r_answer: float
    r_edit: float
    r_correct: float
    r_format: float
    r_tool: float
    total: float


@dataclass(frozen=True)
class AnswerKey:
    """Reference answers, stored in normalization-fixed form."""

    references: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("answer key needs at least one reference")
        for ref in self.references:
            if normalize_answer(ref) != ref:
                raise ValueError(f"reference {ref!r} is not normalization-fixed")

    @classmethod
    def of(cls, *answers: str) -> "AnswerKey":
        return cls(tuple(normalize_answer(a) for a in answers))


def normalize_answer(s: str) -> str:
    """Lowercase, trim, collapse internal whitespace, drop a trailing period."""
    out = " ".join(s.lower().split())
    if out.endswith("."):
        out = out[:-1]
    return out


def levenshtein(a: str, b: str) -> int:
    """Edit distance over Unicode scalar values (two-row dynamic program)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ca != cb),
            )
        previous = current
    return previous[-1]


def exact_reward(pred: str, key: AnswerKey) -> float:
    return 1.0 if normalize_answer(pred) in key.references else 0.0


def edit_reward(pred: str, key: AnswerKey) -> float:
    """Mean similarity to the closest references (up to three), with
    per-reference similarity 1 - lev/max(len), bounded in [0, 1]."""
    p = normalize_answer(pred)
    sims = sorted(
        (1.0 - levenshtein(p, ref) / max(len(p), len(ref), 1) for ref in key.references),
        reverse=True,
    )
    top = sims[:EDIT_REWARD_TOP_K]
    return sum(top) / len(top)


def format_reward(verdict: FormatVerdict) -> float:
    """Binary: 1 only for a fully well-formed transcript."""
    return 1.0 if verdict.all_ok else 0.0


def tool_reward(successful: int, attempted: int) -> float:
    """Successful calls over attempted calls; 0 when nothing was attempted."""
    if not 0 <= successful <= attempted:
        raise ValueError("need 0 <= successful <= attempted")
    if attempted == 0:
        return 0.0
    return successful / attempted


def composite_reward(
    r_a: float, r_e: float, r_f: float, r_t: float, w: RewardWeights
) -> RewardBreakdown:
    r_c = w.lam * r_a + (1.0 - w.lam) * r_e
    total = w.alpha * r_c + w.beta * r_f + w.gamma * r_t
    return RewardBreakdown(
        r_answer=r_a, r_edit=r_e, r_correct=r_c, r_format=r_f, r_tool=r_t, total=total
    )


def vqa_score(pred: str, human_answers: list[str] | tuple[str, ...]) -> float:
    """Soft accuracy min(matches / 3, 1). With a single reference (synthetic
    data has a unique ground truth) this degenerates to exact match so a
    1/3 ceiling cannot distort curation thresholds."""
    if not human_answers:
        raise ValueError("human_answers must be non-empty")
    p = normalize_answer(pred)
    if len(human_answers) == 1:
        return 1.0 if p == normalize_answer(human_answers[0]) else 0.0
    matches = sum(1 for h in human_answers if normalize_answer(h) == p)
    return min(matches / VQA_CONSENSUS, 1.0)
