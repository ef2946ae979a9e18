"""Tiny trainable policy with structured decision heads.

One hidden tanh layer feeds three linear heads: a tool/answer gate, a
keypoint grid head, and an answer head. Decisions are sampled categorically;
every sampled choice records its log-probability so the trainer can form
importance ratios later. Gradients of decision log-probabilities are
hand-derived (closed-form softmax/sigmoid backprop) and checked against
finite differences in the test suite.
"""

from __future__ import annotations

import enum
import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError

UNKNOWN_ANSWER = "unknown"
INIT_WEIGHT_RANGE = 0.05


def answer_vocab(n_symbols: int) -> tuple[str, ...]:
    """Answer tokens: one letter per symbol plus an explicit unknown option."""
    if not 1 <= n_symbols <= 26:
        raise ValueError("n_symbols must be in [1, 26]")
    return tuple(string.ascii_uppercase[:n_symbols]) + (UNKNOWN_ANSWER,)


class DecisionKind(enum.Enum):
    TOOL = "tool"
    ANSWER = "answer"


@dataclass(frozen=True)
class StructuredDecision:
    """One sampled policy emission (the unit the transcript renderer consumes).

    `choice_logprobs` holds the log-probability of each sampled categorical
    in order; `logprob` is their sum. Turn-2 decisions have no gate choice
    because the answer-only constraint forces it.
    """

    kind: DecisionKind
    turn: int
    keypoint_bin: int | None = None
    keypoint: tuple[int, int] | None = None
    answer_idx: int | None = None
    answer: str | None = None
    logprob: float = 0.0
    choice_logprobs: tuple[float, ...] = ()

    def same_action(self, other: "StructuredDecision") -> bool:
        """Equality of what was emitted, ignoring probabilities."""
        return (
            self.kind == other.kind
            and self.keypoint == other.keypoint
            and self.answer == other.answer
        )


@dataclass(frozen=True)
class PolicyArch:
    """Architecture descriptor; fixes the flat parameter layout."""

    obs_size: int = 16
    hidden: int = 64
    grid: int = 8
    n_symbols: int = 8
    canvas_size: int = 64

    @property
    def input_dim(self) -> int:
        # obs pixels + crop pixels + crop-present flag + normalized keypoint
        return 2 * self.obs_size * self.obs_size + 3

    @property
    def n_bins(self) -> int:
        return self.grid * self.grid

    @property
    def n_answers(self) -> int:
        return self.n_symbols + 1

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        return (
            (self.input_dim, self.hidden),
            (self.hidden, 1),
            (self.hidden, self.n_bins),
            (self.hidden, self.n_answers),
        )

    @property
    def n_params(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    @property
    def vocab(self) -> tuple[str, ...]:
        return answer_vocab(self.n_symbols)

    def bin_center(self, bin_idx: int) -> tuple[int, int]:
        """Pixel coordinates of a keypoint-grid cell center on the canvas."""
        if not 0 <= bin_idx < self.n_bins:
            raise ValueError(f"bin index {bin_idx} outside grid of {self.n_bins}")
        side = self.canvas_size // self.grid
        by, bx = divmod(bin_idx, self.grid)
        return (bx * side + side // 2, by * side + side // 2)

    def to_dict(self) -> dict:
        return {
            "obs_size": self.obs_size,
            "hidden": self.hidden,
            "grid": self.grid,
            "n_symbols": self.n_symbols,
            "canvas_size": self.canvas_size,
        }


@dataclass
class PolicyParams:
    """Flat 64-bit parameter vector plus a monotone update counter."""

    theta: np.ndarray
    arch: PolicyArch
    version: int = 0

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params,):
            raise ValueError(
                f"theta length {self.theta.shape} does not match architecture "
                f"({self.arch.n_params} parameters)"
            )

    def views(self) -> tuple[np.ndarray, ...]:
        """(W1, b1, w_gate, b_gate, W_key, b_key, W_ans, b_ans) views into theta."""
        out = []
        offset = 0
        for fan_in, fan_out in self.arch.layer_shapes:
            out.append(self.theta[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            out.append(self.theta[offset : offset + fan_out])
            offset += fan_out
        return tuple(out)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.arch, self.version)


@dataclass(frozen=True)
class PolicyInput:
    """Feature bundle for one decision point."""

    obs: np.ndarray
    crop: np.ndarray
    crop_present: float
    keypoint_used: tuple[float, float]

    def features(self) -> np.ndarray:
        return np.concatenate(
            [
                self.obs,
                self.crop,
                [self.crop_present, self.keypoint_used[0], self.keypoint_used[1]],
            ]
        )


def make_turn1_input(obs_pixels: np.ndarray) -> PolicyInput:
    flat = np.asarray(obs_pixels, dtype=np.float64).ravel()
    return PolicyInput(obs=flat, crop=np.zeros_like(flat), crop_present=0.0, keypoint_used=(0.0, 0.0))


def make_turn2_input(
    obs_pixels: np.ndarray,
    crop_pixels: np.ndarray | None,
    keypoint: tuple[int, int] | None,
    canvas_size: int,
) -> PolicyInput:
    """Turn-2 features: the crop slot holds zeros when the tool call failed."""
    obs = np.asarray(obs_pixels, dtype=np.float64).ravel()
    crop = (
        np.zeros_like(obs)
        if crop_pixels is None
        else np.asarray(crop_pixels, dtype=np.float64).ravel()
    )
    if crop.shape != obs.shape:
        raise ValueError("crop features must match observation feature length")
    kp = (0.0, 0.0) if keypoint is None else (keypoint[0] / canvas_size, keypoint[1] / canvas_size)
    return PolicyInput(obs=obs, crop=crop, crop_present=1.0, keypoint_used=kp)


def init_params(arch: PolicyArch, seed: int) -> PolicyParams:
    """Weights uniform in [-0.05, 0.05], biases zero. The zero gate bias gives
    a 50% initial tool-use rate so both trajectory kinds appear early."""
    rng = np.random.default_rng(seed)
    pieces = []
    for fan_in, fan_out in arch.layer_shapes:
        pieces.append(rng.uniform(-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE, size=fan_in * fan_out))
        pieces.append(np.zeros(fan_out))
    return PolicyParams(np.concatenate(pieces), arch)


# --- forward pass and distributions ---


def _log_sigmoid(z: float) -> float:
    if z >= 0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


def _sigmoid(z: float) -> float:
    return math.exp(_log_sigmoid(z))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


@dataclass(frozen=True)
class Forward:
    x: np.ndarray
    h: np.ndarray
    gate_logit: float
    key_logits: np.ndarray
    ans_logits: np.ndarray


def forward(params: PolicyParams, inp: PolicyInput) -> Forward:
    w1, b1, wg, bg, wk, bk, wa, ba = params.views()
    x = inp.features()
    h = np.tanh(x @ w1 + b1)
    gate = float(h @ wg[:, 0] + bg[0])
    key = h @ wk + bk
    ans = h @ wa + ba
    if not (math.isfinite(gate) and np.isfinite(key).all() and np.isfinite(ans).all()):
        raise NumericalError("non-finite head logits in policy forward pass")
    return Forward(x=x, h=h, gate_logit=gate, key_logits=key, ans_logits=ans)


def _pick(rng: np.random.Generator, log_probs: np.ndarray) -> int:
    return int(rng.choice(log_probs.size, p=np.exp(log_probs)))


def act_turn1(
    params: PolicyParams,
    inp: PolicyInput,
    temperature: float,
    rng: np.random.Generator | None = None,
) -> StructuredDecision:
    """First-turn decision: tool-or-answer gate, then keypoint bin or answer.

    `temperature` scales every head logit; 0 means greedy (argmax, recorded
    log-probabilities are 0 as the limit of a unique argmax).
    """
    fwd = forward(params, inp)
    if temperature == 0.0:
        use_tool = fwd.gate_logit > 0.0
        if use_tool:
            bin_idx = int(np.argmax(fwd.key_logits))
            return StructuredDecision(
                kind=DecisionKind.TOOL,
                turn=1,
                keypoint_bin=bin_idx,
                keypoint=params.arch.bin_center(bin_idx),
            )
        idx = int(np.argmax(fwd.ans_logits))
        return StructuredDecision(
            kind=DecisionKind.ANSWER, turn=1, answer_idx=idx, answer=params.arch.vocab[idx]
        )
    if rng is None:
        raise ValueError("sampling requires an rng when temperature > 0")
    gate = fwd.gate_logit / temperature
    p_tool = _sigmoid(gate)
    use_tool = bool(rng.random() < p_tool)
    if use_tool:
        log_key = _log_softmax(fwd.key_logits / temperature)
        bin_idx = _pick(rng, log_key)
        lps = (_log_sigmoid(gate), float(log_key[bin_idx]))
        return StructuredDecision(
            kind=DecisionKind.TOOL,
            turn=1,
            keypoint_bin=bin_idx,
            keypoint=params.arch.bin_center(bin_idx),
            logprob=sum(lps),
            choice_logprobs=lps,
        )
    log_ans = _log_softmax(fwd.ans_logits / temperature)
    idx = _pick(rng, log_ans)
    lps = (_log_sigmoid(-gate), float(log_ans[idx]))
    return StructuredDecision(
        kind=DecisionKind.ANSWER,
        turn=1,
        answer_idx=idx,
        answer=params.arch.vocab[idx],
        logprob=sum(lps),
        choice_logprobs=lps,
    )


def act_turn2(
    params: PolicyParams,
    inp: PolicyInput,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> StructuredDecision:
    """Second-turn decision: the answer-only constraint forces the kind, so
    the only sampled choice is the answer index."""
    fwd = forward(params, inp)
    if temperature == 0.0:
        idx = int(np.argmax(fwd.ans_logits))
        return StructuredDecision(
            kind=DecisionKind.ANSWER, turn=2, answer_idx=idx, answer=params.arch.vocab[idx]
        )
    if rng is None:
        raise ValueError("sampling requires an rng when temperature > 0")
    log_ans = _log_softmax(fwd.ans_logits / temperature)
    idx = _pick(rng, log_ans)
    lps = (float(log_ans[idx]),)
    return StructuredDecision(
        kind=DecisionKind.ANSWER,
        turn=2,
        answer_idx=idx,
        answer=params.arch.vocab[idx],
        logprob=lps[0],
        choice_logprobs=lps,
    )


def decision_logprobs(
    params: PolicyParams,
    inp: PolicyInput,
    decision: StructuredDecision,
    temperature: float = 1.0,
) -> np.ndarray:
    """Log-probability of each sampled choice in `decision` under `params`.

    Matches the sampling path's arithmetic exactly, so re-scoring a fresh
    decision under unchanged parameters reproduces its recorded values.
    """
    if temperature <= 0.0:
        raise ValueError("scoring requires temperature > 0")
    fwd = forward(params, inp)
    gate = fwd.gate_logit / temperature
    if decision.turn == 2:
        if decision.kind is not DecisionKind.ANSWER:
            raise ValueError("turn-2 decisions are answer-only")
        log_ans = _log_softmax(fwd.ans_logits / temperature)
        return np.array([log_ans[decision.answer_idx]])
    if decision.kind is DecisionKind.TOOL:
        log_key = _log_softmax(fwd.key_logits / temperature)
        return np.array([_log_sigmoid(gate), log_key[decision.keypoint_bin]])
    log_ans = _log_softmax(fwd.ans_logits / temperature)
    return np.array([_log_sigmoid(-gate), log_ans[decision.answer_idx]])


def logprob_of(
    params: PolicyParams,
    inp: PolicyInput,
    decision: StructuredDecision,
    temperature: float = 1.0,
) -> float:
    return float(decision_logprobs(params, inp, decision, temperature).sum())


def grad_weighted_logprob(
    params: PolicyParams,
    inp: PolicyInput,
    decision: StructuredDecision,
    weights: np.ndarray,
    temperature: float = 1.0,
) -> np.ndarray:
    """Gradient of sum_t weights[t] * logprob(choice_t) w.r.t. theta.

    Backprop is closed-form: d log softmax / d logits = onehot - softmax,
    d log sigmoid(z) / dz = sigmoid(-z), both scaled by 1/temperature, then
    chained through the shared tanh layer.
    """
    arch = params.arch
    w1, b1, wg, bg, wk, bk, wa, ba = params.views()
    fwd = forward(params, inp)
    weights = np.asarray(weights, dtype=np.float64)

    gate_grad = 0.0  # d(objective)/d gate_logit
    key_grad = np.zeros(arch.n_bins)
    ans_grad = np.zeros(arch.n_answers)
    tau = temperature
    gate = fwd.gate_logit / tau

    if decision.turn == 2:
        probs = np.exp(_log_softmax(fwd.ans_logits / tau))
        onehot = np.zeros(arch.n_answers)
        onehot[decision.answer_idx] = 1.0
        ans_grad = weights[0] * (onehot - probs) / tau
    elif decision.kind is DecisionKind.TOOL:
        gate_grad = weights[0] * _sigmoid(-gate) / tau
        probs = np.exp(_log_softmax(fwd.key_logits / tau))
        onehot = np.zeros(arch.n_bins)
        onehot[decision.keypoint_bin] = 1.0
        key_grad = weights[1] * (onehot - probs) / tau
    else:
        gate_grad = -weights[0] * _sigmoid(gate) / tau
        probs = np.exp(_log_softmax(fwd.ans_logits / tau))
        onehot = np.zeros(arch.n_answers)
        onehot[decision.answer_idx] = 1.0
        ans_grad = weights[1] * (onehot - probs) / tau

    dh = gate_grad * wg[:, 0] + wk @ key_grad + wa @ ans_grad
    dz = dh * (1.0 - fwd.h * fwd.h)

    grad = np.zeros(arch.n_params)
    out = PolicyParams(grad, arch)  # reuse the slicing layout for writes
    gw1, gb1, gwg, gbg, gwk, gbk, gwa, gba = out.views()
    gw1 += np.outer(fwd.x, dz)
    gb1 += dz
    gwg[:, 0] += gate_grad * fwd.h
    gbg[0] += gate_grad
    gwk += np.outer(fwd.h, key_grad)
    gbk += key_grad
    gwa += np.outer(fwd.h, ans_grad)
    gba += ans_grad
    return grad


def grad_logprob(
    params: PolicyParams,
    inp: PolicyInput,
    decision: StructuredDecision,
    temperature: float = 1.0,
) -> np.ndarray:
    """Gradient of the decision's total log-probability w.r.t. theta."""
    n = len(decision_logprobs(params, inp, decision, temperature))
    return grad_weighted_logprob(params, inp, decision, np.ones(n), temperature)


# --- checkpoints ---


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params))


def save_checkpoint(
    path: str | Path,
    params: PolicyParams,
    moments: AdamState | None = None,
    seed: int | None = None,
) -> None:
    """Header line (JSON) + little-endian float64 arrays: theta, then Adam
    moments when present. Round-trips exactly."""
    header = {
        "arch": params.arch.to_dict(),
        "layer_shapes": [list(s) for s in params.arch.layer_shapes],
        "version": params.version,
        "seed": seed,
        "has_moments": moments is not None,
    }
    blob = bytearray(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    blob += params.theta.astype("<f8").tobytes()
    if moments is not None:
        blob += moments.m.astype("<f8").tobytes()
        blob += moments.v.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, AdamState | None, int | None]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    arch = PolicyArch(**header["arch"])
    if [list(s) for s in arch.layer_shapes] != header["layer_shapes"]:
        raise ValueError(f"{path}: layer shapes disagree with architecture fields")
    body = raw[nl + 1 :]
    n = arch.n_params
    expected = n * 8 * (3 if header["has_moments"] else 1)
    if len(body) != expected:
        raise ValueError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    theta = np.frombuffer(body[: n * 8], dtype="<f8").copy()
    params = PolicyParams(theta, arch, version=header["version"])
    moments = None
    if header["has_moments"]:
        m = np.frombuffer(body[n * 8 : 2 * n * 8], dtype="<f8").copy()
        v = np.frombuffer(body[2 * n * 8 :], dtype="<f8").copy()
        moments = AdamState(m, v)
    return params, moments, header.get("seed")
