"""Difficulty scoring by repeated tool-free evaluation, and mix weighting.

A sample's difficulty is the mean soft VQA score over k tool-free shots
(the policy answers from the low-resolution view alone). Samples scoring
strictly below the threshold land in the hard bucket; the training mix then
draws hard samples with a configured probability, uniform within buckets.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .env import EnvConfig, SyntheticSample, observe
from .policy import PolicyParams, act_turn2, make_turn1_input
from .reward import vqa_score
from .rollout import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_SHOTS = 8
DEFAULT_THRESHOLD = 0.5
DEFAULT_HARD_FRACTION = 0.8

AnswerFn = Callable[[SyntheticSample, np.random.Generator], str]


class Bucket(enum.Enum):
    HARD = "hard"
    EASY = "easy"


@dataclass(frozen=True)
class MixPolicy:
    hard_fraction: float = DEFAULT_HARD_FRACTION
    threshold: float = DEFAULT_THRESHOLD
    shots: int = DEFAULT_SHOTS
    eval_temperature: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class CurationRecord:
    sample_id: int
    shots: int
    scores: tuple[float, ...]
    mean_score: float
    bucket: Bucket

    @classmethod
    def from_scores(cls, sample_id: int, scores: list[float], threshold: float) -> "CurationRecord":
        mean = float(np.mean(scores))
        bucket = Bucket.HARD if mean < threshold else Bucket.EASY
        return cls(sample_id, len(scores), tuple(scores), mean, bucket)


def score_sample(
    policy: PolicyParams | AnswerFn,
    sample: SyntheticSample,
    shots: int,
    temperature: float,
    seed: int,
    env_cfg: EnvConfig,
    threshold: float = DEFAULT_THRESHOLD,
) -> CurationRecord:
    """Run `shots` tool-free answers and average their soft VQA scores.

    `policy` is either trained parameters (scored through the answer head on
    the observation alone) or a plain callable, which lets fixed stubs drive
    the bucket-boundary tests.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    obs = observe(sample, env_cfg).pixels
    inp = make_turn1_input(obs)
    scores: list[float] = []
    for shot in range(shots):
        rng = np.random.default_rng(derive_seed(seed, sample.sample_id, shot))
        if isinstance(policy, PolicyParams):
            decision = act_turn2(policy, inp, temperature, rng)
            answer = decision.answer or ""
        else:
            answer = policy(sample, rng)
        scores.append(vqa_score(answer, list(sample.answer_key.references)))
    return CurationRecord.from_scores(sample.sample_id, scores, threshold)


def curate(records: list[CurationRecord], policy: MixPolicy) -> np.ndarray:
    """Sampling weights (aligned with `records`) under which a draw is hard
    with probability `hard_fraction`, uniform within each bucket. An empty
    bucket hands its mass to the other with a logged warning."""
    if not records:
        raise ValueError("records must be non-empty")
    hard = [i for i, r in enumerate(records) if r.bucket is Bucket.HARD]
    easy = [i for i, r in enumerate(records) if r.bucket is Bucket.EASY]
    hard_mass = policy.hard_fraction
    easy_mass = 1.0 - policy.hard_fraction
    if not hard:
        if hard_mass > 0:
            logger.warning("hard bucket is empty; all draws fall to easy samples")
        hard_mass, easy_mass = 0.0, 1.0
    elif not easy:
        if easy_mass > 0:
            logger.warning("easy bucket is empty; all draws fall to hard samples")
        hard_mass, easy_mass = 1.0, 0.0
    weights = np.zeros(len(records))
    if hard:
        weights[hard] = hard_mass / len(hard)
    if easy:
        weights[easy] = easy_mass / len(easy)
    return weights


def score_dataset(
    policy: PolicyParams | AnswerFn,
    samples: list[SyntheticSample],
    mix: MixPolicy,
    seed: int,
    env_cfg: EnvConfig,
) -> list[CurationRecord]:
    return [
        score_sample(policy, s, mix.shots, mix.eval_temperature, seed, env_cfg, mix.threshold)
        for s in samples
    ]


def save_records(path: str | Path, records: list[CurationRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": r.sample_id,
                        "shots": r.shots,
                        "scores": list(r.scores),
                        "mean_score": r.mean_score,
                        "bucket": r.bucket.value,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_records(path: str | Path) -> list[CurationRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        records.append(
            CurationRecord(
                sample_id=row["sample_id"],
                shots=row["shots"],
                scores=tuple(row["scores"]),
                mean_score=row["mean_score"],
                bucket=Bucket(row["bucket"]),
            )
        )
    return records
