"""Episode runner: observation, decisions, tool execution, transcript, reward.

An episode has at most two assistant turns. Turn 1 may answer directly or
call the zoom tool once; a tool call (successful or not) consumes the whole
tool budget, and turn 2 is constrained to answer-only. Rewards are computed
from the rendered transcript, so recomputing them from a stored transcript
reproduces the same breakdown bit for bit.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import protocol
from .env import EnvConfig, SyntheticSample, observe
from .policy import (
    DecisionKind,
    PolicyInput,
    PolicyParams,
    StructuredDecision,
    act_turn1,
    act_turn2,
    make_turn1_input,
    make_turn2_input,
)
from .protocol import (
    SegmentKind,
    Speaker,
    ToolRegistry,
    Transcript,
    parse_tool_call,
    parse_turn,
    render_turn,
    validate_format,
)
from .reward import (
    AnswerKey,
    RewardBreakdown,
    RewardWeights,
    composite_reward,
    edit_reward,
    exact_reward,
    format_reward,
    tool_reward,
)
from .raster import coarse_view
from .zoomtool import (
    EpisodeImages,
    TOOL_ERROR_TEXT,
    ZoomConfig,
    default_registry,
    zoom_tool_adapter,
)

THINK_TEXT = "reasoning"
THREADS_ENV_VAR = "ZOOMRL_THREADS"

SYSTEM_PROMPT_TEMPLATE = """You can call each available tool at most one time.

Available tools:
{tool_descriptions}

Respond in this protocol:
1. Reason inside <think> tags first.
2. Then either give the final answer inside <answer> tags, or call a tool
   inside <tool> tags with one 'key: value' argument per line; the first
   line must be 'name: <tool_name>'.
3. Tool output appears inside <result> tags.
4. End the conversation by giving the final answer inside <answer> tags.

Use only the listed tools and arguments."""

USER_PROMPT_TEMPLATE = """The image size is {image_size}.
Look closely before answering; zoom in if the detail is too small to read.
Answer with a single word.
Question: {question}"""


class Category(enum.Enum):
    NO_TOOL = "no_tool"
    TOOL_SUCCESS = "tool_success"
    TOOL_FAIL = "tool_fail"


@dataclass(frozen=True)
class EpisodeConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    zoom: ZoomConfig = field(default_factory=ZoomConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    temperature: float = 1.0
    obs_resolution: int | None = None  # None means env.obs_size
    crop_resize: bool = True
    inject_bad_call: bool = False
    registry: ToolRegistry = field(default_factory=default_registry)

    @property
    def resolution(self) -> int:
        return self.env.obs_size if self.obs_resolution is None else self.obs_resolution

    @property
    def perception_factor(self) -> int:
        """Canvas pixels averaged per perceived pixel; the fixed-rate
        bottleneck every presented image passes through."""
        if self.resolution < 1 or self.env.canvas_size % self.resolution:
            raise ValueError(
                f"observation resolution {self.resolution} must divide canvas size "
                f"{self.env.canvas_size}"
            )
        return self.env.canvas_size // self.resolution

    def effective_zoom(self) -> ZoomConfig:
        """Zoom output sized to the presented image, or left at the raw
        window size when crop resizing is disabled."""
        if self.crop_resize:
            return self.zoom
        return ZoomConfig(
            crop_size=self.zoom.crop_size,
            output_size=(self.zoom.crop_size, self.zoom.crop_size),
            source=self.zoom.source,
        )


@dataclass
class Trajectory:
    sample_id: int
    decisions: list[StructuredDecision]
    inputs: list[PolicyInput]
    transcript: Transcript
    reward: RewardBreakdown
    category: Category
    seed: int

    @property
    def n_decision_tokens(self) -> int:
        return sum(max(len(d.choice_logprobs), 1) for d in self.decisions)


@dataclass
class GroupBatch:
    prompt_groups: list[tuple[int, list[Trajectory]]]
    group_size: int

    def trajectories(self) -> list[Trajectory]:
        return [t for _, group in self.prompt_groups for t in group]


def reward_from_transcript(
    transcript: Transcript, key: AnswerKey, weights: RewardWeights
) -> RewardBreakdown:
    """Reward derived purely from the transcript text plus the answer key.

    Attempted calls are the assistant's tool blocks; a call succeeded when
    its result turn is not the error text. The answer scored is the last
    answer block an assistant turn carries.
    """
    verdict = validate_format(transcript)
    attempted = sum(t.count(SegmentKind.TOOL) for t in transcript.assistant_turns())
    succeeded = sum(
        1
        for t in transcript.result_turns()
        if (seg := t.first(SegmentKind.RESULT)) is not None
        and seg.content.strip() != TOOL_ERROR_TEXT
    )
    answer_text = ""
    for turn in transcript.assistant_turns():
        seg = turn.first(SegmentKind.ANSWER)
        if seg is not None:
            answer_text = seg.content
    return composite_reward(
        exact_reward(answer_text, key),
        edit_reward(answer_text, key),
        format_reward(verdict),
        tool_reward(succeeded, attempted),
        weights,
    )


def _perceive(crop_raster, cfg: EpisodeConfig) -> np.ndarray:
    return coarse_view(crop_raster, cfg.perception_factor, cfg.env.obs_size).pixels


def _observe_features(sample: SyntheticSample, cfg: EpisodeConfig) -> np.ndarray:
    return _perceive(sample.canvas, cfg)


def run_episode(
    params: PolicyParams, sample: SyntheticSample, cfg: EpisodeConfig, seed: int
) -> Trajectory:
    """One full rollout. At most one tool call ever executes; a failed call
    still consumes the budget and the second turn proceeds with a zero crop."""
    rng = np.random.default_rng(seed)
    image_size = f"{sample.canvas.width}x{sample.canvas.height}"
    transcript = Transcript()
    transcript.append(
        parse_turn(
            SYSTEM_PROMPT_TEMPLATE.format(tool_descriptions=cfg.registry.descriptions()),
            Speaker.SYSTEM,
        )
    )
    transcript.append(
        parse_turn(
            USER_PROMPT_TEMPLATE.format(image_size=image_size, question=sample.question),
            Speaker.USER,
        )
    )

    obs = _observe_features(sample, cfg)
    input1 = make_turn1_input(obs)
    decision1 = act_turn1(params, input1, cfg.temperature, rng)
    decisions = [decision1]
    inputs = [input1]

    executed_calls = 0
    category = Category.NO_TOOL
    if decision1.kind is DecisionKind.TOOL:
        turn1_raw = render_turn(decision1, THINK_TEXT)
        if cfg.inject_bad_call:
            turn1_raw = f"{protocol.THINK_OPEN}{THINK_TEXT}</think>\n<tool>\nname: zoom\nkeypoint: banana\n</tool>"
        turn1 = parse_turn(turn1_raw, Speaker.ASSISTANT)
        transcript.append(turn1)

        tool_seg = turn1.first(SegmentKind.TOOL)
        call = parse_tool_call(tool_seg.content if tool_seg else "", cfg.registry)
        payload = zoom_tool_adapter(
            call, EpisodeImages(sample.canvas, sample.canvas), cfg.effective_zoom()
        )
        executed_calls += 1
        assert executed_calls <= 1, "tool budget exceeded"
        transcript.append(payload.result_turn)

        if payload.ok:
            category = Category.TOOL_SUCCESS
            crop_features = _perceive(payload.crop, cfg)
            input2 = make_turn2_input(
                obs, crop_features, decision1.keypoint, cfg.env.canvas_size
            )
        else:
            category = Category.TOOL_FAIL
            input2 = make_turn2_input(obs, None, None, cfg.env.canvas_size)
        decision2 = act_turn2(params, input2, cfg.temperature, rng)
        turn2_raw = render_turn(decision2, THINK_TEXT)
        if not protocol.constrain_second_turn(turn2_raw[len(protocol.THINK_OPEN) :]):
            raise AssertionError("second turn escaped the answer-only constraint")
        transcript.append(parse_turn(turn2_raw, Speaker.ASSISTANT))
        decisions.append(decision2)
        inputs.append(input2)
    else:
        transcript.append(parse_turn(render_turn(decision1, THINK_TEXT), Speaker.ASSISTANT))

    breakdown = reward_from_transcript(transcript, sample.answer_key, cfg.weights)
    return Trajectory(
        sample_id=sample.sample_id,
        decisions=decisions,
        inputs=inputs,
        transcript=transcript,
        reward=breakdown,
        category=category,
        seed=seed,
    )


def _worker_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def sample_group(
    params: PolicyParams,
    sample: SyntheticSample,
    group_size: int,
    base_seed: int,
    cfg: EpisodeConfig,
) -> list[Trajectory]:
    """Independent episodes with seeds base_seed + 0 .. group_size - 1 under
    one parameter snapshot. Seeds bind to trajectory identity, so results do
    not depend on scheduling."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    seeds = [base_seed + g for g in range(group_size)]
    workers = min(_worker_count(), group_size)
    if workers == 1:
        return [run_episode(params, sample, cfg, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: run_episode(params, sample, cfg, s), seeds))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class EvalReport:
    n: int
    accuracy: float
    tool_use_rate: float
    tool_success_rate: float
    mean_reward: float


def evaluate(
    params: PolicyParams,
    samples: list[SyntheticSample],
    cfg: EpisodeConfig,
    seed: int = 0,
    limit: int | None = None,
) -> EvalReport:
    """Run one episode per sample (greedy when cfg.temperature is 0) and
    aggregate accuracy, tool-use rate, and tool success rate."""
    subset = samples if limit is None else samples[:limit]
    if not subset:
        raise ValueError("no samples to evaluate")
    hits = 0
    attempts = 0
    successes = 0
    reward_sum = 0.0
    for i, sample in enumerate(subset):
        traj = run_episode(params, sample, cfg, derive_seed(seed, i))
        hits += traj.reward.r_answer == 1.0
        attempts += traj.category is not Category.NO_TOOL
        successes += traj.category is Category.TOOL_SUCCESS
        reward_sum += traj.reward.total
    n = len(subset)
    return EvalReport(
        n=n,
        accuracy=hits / n,
        tool_use_rate=attempts / n,
        tool_success_rate=successes / attempts if attempts else 0.0,
        mean_reward=reward_sum / n,
    )


def collect_batch(
    params: PolicyParams,
    dataset: list[SyntheticSample],
    batch_size: int,
    group_size: int,
    step_seed: int,
    cfg: EpisodeConfig,
    weights: np.ndarray | None = None,
) -> GroupBatch:
    """Draw `batch_size` prompts (without replacement within the step,
    optionally weighted by the curation mix) and roll a group for each."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(derive_seed(step_seed, 0xD47A))
    n = len(dataset)
    take = min(batch_size, n)
    if weights is not None:
        p = np.asarray(weights, dtype=np.float64)
        if p.shape != (n,):
            raise ValueError("weights must align with the dataset")
        take = min(take, int(np.count_nonzero(p)))
        idx = rng.choice(n, size=take, replace=False, p=p / p.sum())
    else:
        idx = rng.choice(n, size=take, replace=False)
    groups = []
    for j, i in enumerate(idx):
        base = derive_seed(step_seed, 1 + j)
        sample = dataset[int(i)]
        groups.append((sample.sample_id, sample_group(params, sample, group_size, base, cfg)))
    return GroupBatch(prompt_groups=groups, group_size=group_size)
