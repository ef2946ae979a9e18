"""Group-relative advantages, clipped surrogate loss, and the training loop.

Advantages normalize each trajectory's reward against its own group's mean
and population standard deviation. The surrogate uses asymmetric ratio
clipping (a larger upper bound than lower), which lets low-probability
actions grow faster; gradients vanish through a token exactly when the
clipped branch is the active minimum. Telemetry tracks mean advantage per
tool-use category, the signal showing which behavior the optimizer is
reinforcing.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError
from .policy import AdamState, PolicyParams, decision_logprobs, grad_weighted_logprob
from .rollout import Category, EpisodeConfig, GroupBatch, Trajectory, collect_batch, derive_seed

ZERO_VARIANCE_GUARD = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800
    batch_size: int = 4
    group_size: int = 3
    lr_peak: float = 3e-3
    warmup_steps: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    eps_low: float = 0.2
    eps_high: float = 0.28
    max_grad_norm: float = 1.0
    kl_coeff: float = 0.0
    inner_epochs: int = 1
    loss_agg: str = "token"
    sample_temperature: float = 1.0

    def validate(self) -> None:
        if self.eps_low <= 0 or self.eps_high < self.eps_low:
            raise ConfigError("need eps_low > 0 and eps_high >= eps_low")
        if self.kl_coeff != 0.0:
            raise ConfigError("KL regularization is unsupported; kl_coeff must stay 0")
        if self.loss_agg not in ("token", "sequence"):
            raise ConfigError("loss_agg must be 'token' or 'sequence'")
        if self.steps < 0 or self.batch_size < 1 or self.group_size < 2:
            raise ConfigError("need steps >= 0, batch_size >= 1, group_size >= 2")
        if self.inner_epochs < 1:
            raise ConfigError("inner_epochs must be >= 1")


def group_advantages(rewards: list[float] | np.ndarray) -> np.ndarray:
    """(r - mean) / population std per group; all zeros when the group's
    rewards are (numerically) constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least 2 rewards")
    std = float(r.std())
    if std <= ZERO_VARIANCE_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def batch_advantages(batch: GroupBatch) -> list[float]:
    """Per-trajectory advantages, flattened in batch order."""
    out: list[float] = []
    for _, group in batch.prompt_groups:
        out.extend(group_advantages([t.reward.total for t in group]).tolist())
    return out


@dataclass
class SurrogateResult:
    loss: float
    grad: np.ndarray
    advantages: list[float]
    n_tokens: int
    clipped_tokens: int


def _gradient_flows(ratio: float, advantage: float, cfg: TrainConfig) -> bool:
    """The min of the unclipped and clipped branches passes gradient unless
    the ratio sits beyond the active bound: above 1 + eps_high with positive
    advantage, or below 1 - eps_low with negative advantage."""
    if advantage > 0:
        return ratio <= 1.0 + cfg.eps_high
    if advantage < 0:
        return ratio >= 1.0 - cfg.eps_low
    return False


def surrogate_loss(
    batch: GroupBatch,
    params: PolicyParams,
    cfg: TrainConfig,
    ref_params: PolicyParams | None = None,
) -> SurrogateResult:
    """Clipped-ratio policy loss and its gradient over the batch.

    Each sampled categorical choice is one token; ratios compare the current
    parameters against the behavior log-probabilities recorded at sampling
    time. With kl_coeff pinned to 0, `ref_params` has no effect on the value
    or gradient; the parameter exists so that independence is testable.
    """
    del ref_params  # no KL term: the loss must not depend on a reference
    advantages = batch_advantages(batch)
    trajectories = batch.trajectories()
    n_tokens = sum(t.n_decision_tokens for t in trajectories)
    if n_tokens == 0:
        return SurrogateResult(0.0, np.zeros(params.arch.n_params), advantages, 0, 0)

    total_term = 0.0
    grad = np.zeros(params.arch.n_params)
    clipped = 0
    temperature = cfg.sample_temperature
    for traj, adv in zip(trajectories, advantages):
        traj_term = 0.0
        traj_grad = np.zeros(params.arch.n_params)
        for inp, dec in zip(traj.inputs, traj.decisions):
            old_lps = np.asarray(dec.choice_logprobs)
            new_lps = decision_logprobs(params, inp, dec, temperature)
            ratios = np.exp(new_lps - old_lps)
            if not np.isfinite(ratios).all():
                raise NumericalError(
                    f"non-finite importance ratio (sample {traj.sample_id}, seed {traj.seed})"
                )
            token_weights = np.zeros_like(ratios)
            for t, rho in enumerate(ratios):
                unclipped = rho * adv
                bounded = min(max(rho, 1.0 - cfg.eps_low), 1.0 + cfg.eps_high) * adv
                traj_term += min(unclipped, bounded)
                if _gradient_flows(float(rho), adv, cfg):
                    token_weights[t] = adv * rho
                else:
                    clipped += 1
            if token_weights.any():
                traj_grad += grad_weighted_logprob(params, inp, dec, token_weights, temperature)
        if cfg.loss_agg == "sequence":
            total_term += traj_term / traj.n_decision_tokens
            grad += traj_grad / traj.n_decision_tokens
        else:
            total_term += traj_term
            grad += traj_grad
    denom = len(trajectories) if cfg.loss_agg == "sequence" else n_tokens
    loss = -total_term / denom
    grad = -grad / denom
    if not (math.isfinite(loss) and np.isfinite(grad).all()):
        raise NumericalError("non-finite surrogate loss or gradient")
    return SurrogateResult(loss, grad, advantages, n_tokens, clipped)


def schedule_lr(cfg: TrainConfig, update_index: int) -> float:
    """Linear warmup to lr_peak over `warmup_steps` updates, then cosine
    decay to zero by the final configured step. `update_index` is 1-based."""
    if update_index <= 0:
        return 0.0
    if cfg.warmup_steps > 0 and update_index <= cfg.warmup_steps:
        return cfg.lr_peak * update_index / cfg.warmup_steps
    remaining = max(cfg.steps - cfg.warmup_steps, 1)
    progress = min((update_index - cfg.warmup_steps) / remaining, 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(
    params: PolicyParams,
    gradient: np.ndarray,
    cfg: TrainConfig,
    moments: AdamState,
) -> tuple[PolicyParams, float, float]:
    """Global-norm clip, then a bias-corrected Adam update at the scheduled
    learning rate. Returns (params, pre-clip gradient norm, lr). Mutates
    theta and moments in place; version increments by one."""
    g = np.asarray(gradient, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericalError("non-finite gradient passed to optimizer")
    norm = float(np.linalg.norm(g))
    if norm > cfg.max_grad_norm > 0:
        g = g * (cfg.max_grad_norm / norm)
    t = params.version + 1
    lr = schedule_lr(cfg, t)
    moments.m *= cfg.adam_beta1
    moments.m += (1.0 - cfg.adam_beta1) * g
    moments.v *= cfg.adam_beta2
    moments.v += (1.0 - cfg.adam_beta2) * g * g
    m_hat = moments.m / (1.0 - cfg.adam_beta1**t)
    v_hat = moments.v / (1.0 - cfg.adam_beta2**t)
    params.theta -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    params.version = t
    return params, norm, lr


def category_advantage_telemetry(
    batch: GroupBatch, advantages: list[float]
) -> dict[Category, float]:
    """Mean advantage per tool-use category; absent categories are simply
    missing from the result rather than reported as zero."""
    sums: dict[Category, list[float]] = {}
    for traj, adv in zip(batch.trajectories(), advantages):
        sums.setdefault(traj.category, []).append(adv)
    return {cat: float(np.mean(vals)) for cat, vals in sums.items()}


@dataclass
class StepStats:
    step: int
    mean_reward: float
    mean_r_answer: float
    mean_r_edit: float
    mean_r_correct: float
    mean_r_format: float
    mean_r_tool: float
    adv_no_tool: float | None
    adv_tool_success: float | None
    adv_tool_fail: float | None
    cum_adv_no_tool: float
    cum_adv_tool_success: float
    cum_adv_tool_fail: float
    tool_use_rate: float
    accuracy: float
    grad_norm_preclip: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


CSV_COLUMNS = (
    "step",
    "reward",
    "adv_no_tool",
    "adv_tool_success",
    "adv_tool_fail",
    "tool_use_rate",
    "accuracy",
    "lr",
)


def stats_csv_row(s: StepStats) -> list[str]:
    def cell(v: float | int | None) -> str:
        return "" if v is None else repr(v) if isinstance(v, float) else str(v)

    return [
        cell(s.step),
        cell(s.mean_reward),
        cell(s.adv_no_tool),
        cell(s.adv_tool_success),
        cell(s.adv_tool_fail),
        cell(s.tool_use_rate),
        cell(s.accuracy),
        cell(s.lr),
    ]


def write_metrics(
    stats: list[StepStats], jsonl_path: str | Path, csv_path: str | Path, meta: dict
) -> None:
    """JSONL with a leading meta line (the only place timestamps may live)
    plus a plot-ready CSV with fixed columns."""
    jsonl_path, csv_path = Path(jsonl_path), Path(csv_path)
    jsonl_path.parent.mkdir(parents=True, exist_ok=True)
    with jsonl_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for s in stats:
            fh.write(s.to_json() + "\n")
    with csv_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for s in stats:
            writer.writerow(stats_csv_row(s))


def read_metrics_jsonl(path: str | Path) -> tuple[dict, list[dict]]:
    meta: dict = {}
    rows: list[dict] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        if "meta" in row:
            meta = row["meta"]
        else:
            rows.append(row)
    return meta, rows


@dataclass
class TrainResult:
    params: PolicyParams
    moments: AdamState
    stats: list[StepStats]


def train(
    dataset: list,
    cfg: TrainConfig,
    seed: int,
    episode_cfg: EpisodeConfig,
    weights: np.ndarray | None = None,
    params: PolicyParams | None = None,
    moments: AdamState | None = None,
    on_step=None,
) -> TrainResult:
    """Run collect -> advantages -> surrogate -> update until `cfg.steps`
    optimizer versions have been applied. Deterministic given the seed; a
    NumericalError aborts with the offending step recorded."""
    from .policy import PolicyArch, init_params  # local to avoid import noise at module load

    cfg.validate()
    if params is None:
        params = init_params(
            PolicyArch(
                obs_size=episode_cfg.env.obs_size,
                n_symbols=episode_cfg.env.alphabet_size,
                canvas_size=episode_cfg.env.canvas_size,
            ),
            seed=derive_seed(seed, 0x1817),
        )
    if moments is None:
        moments = AdamState.zeros(params.arch.n_params)
    rollout_cfg = EpisodeConfig(
        env=episode_cfg.env,
        zoom=episode_cfg.zoom,
        weights=episode_cfg.weights,
        temperature=cfg.sample_temperature,
        obs_resolution=episode_cfg.obs_resolution,
        crop_resize=episode_cfg.crop_resize,
        registry=episode_cfg.registry,
    )
    stats: list[StepStats] = []
    cum = {Category.NO_TOOL: 0.0, Category.TOOL_SUCCESS: 0.0, Category.TOOL_FAIL: 0.0}
    while params.version < cfg.steps:
        step = params.version + 1
        try:
            batch = collect_batch(
                params,
                dataset,
                cfg.batch_size,
                cfg.group_size,
                derive_seed(seed, step),
                rollout_cfg,
                weights=weights,
            )
            result = surrogate_loss(batch, params, cfg)
            params, grad_norm, lr = optimizer_step(params, result.grad, cfg, moments)
            for _ in range(cfg.inner_epochs - 1):
                extra = surrogate_loss(batch, params, cfg)
                params, _, lr = optimizer_step(params, extra.grad, cfg, moments)
        except NumericalError as exc:
            raise NumericalError(f"aborted at step {step}: {exc}") from exc

        trajectories = batch.trajectories()
        per_cat = category_advantage_telemetry(batch, result.advantages)
        for traj, adv in zip(trajectories, result.advantages):
            cum[traj.category] += adv
        rewards = [t.reward for t in trajectories]
        entry = StepStats(
            step=step,
            mean_reward=float(np.mean([r.total for r in rewards])),
            mean_r_answer=float(np.mean([r.r_answer for r in rewards])),
            mean_r_edit=float(np.mean([r.r_edit for r in rewards])),
            mean_r_correct=float(np.mean([r.r_correct for r in rewards])),
            mean_r_format=float(np.mean([r.r_format for r in rewards])),
            mean_r_tool=float(np.mean([r.r_tool for r in rewards])),
            adv_no_tool=per_cat.get(Category.NO_TOOL),
            adv_tool_success=per_cat.get(Category.TOOL_SUCCESS),
            adv_tool_fail=per_cat.get(Category.TOOL_FAIL),
            cum_adv_no_tool=cum[Category.NO_TOOL],
            cum_adv_tool_success=cum[Category.TOOL_SUCCESS],
            cum_adv_tool_fail=cum[Category.TOOL_FAIL],
            tool_use_rate=float(
                np.mean([t.category is not Category.NO_TOOL for t in trajectories])
            ),
            accuracy=float(np.mean([r.r_answer for r in rewards])),
            grad_norm_preclip=grad_norm,
            lr=lr,
        )
        stats.append(entry)
        if on_step is not None:
            on_step(entry)
    return TrainResult(params=params, moments=moments, stats=stats)


def final_window_summary(stats: list[StepStats], fraction: float = 0.2) -> dict[str, float | None]:
    """Mean advantage per category over the trailing `fraction` of steps,
    ignoring steps where a category was absent."""
    if not stats:
        return {"adv_no_tool": None, "adv_tool_success": None, "adv_tool_fail": None}
    tail = stats[max(0, int(len(stats) * (1.0 - fraction))) :]

    def mean_of(attr: str) -> float | None:
        vals = [getattr(s, attr) for s in tail if getattr(s, attr) is not None]
        return float(np.mean(vals)) if vals else None

    return {
        "adv_no_tool": mean_of("adv_no_tool"),
        "adv_tool_success": mean_of("adv_tool_success"),
        "adv_tool_fail": mean_of("adv_tool_fail"),
    }
