"""Conversation tag grammar, tool-call codec, and format validation.

Turns are flat sequences of tagged blocks (`<think>`, `<tool>`, `<result>`,
`<answer>`); tags never nest, and anything that is not part of a well-formed
block becomes an untagged segment rather than a parse failure. Tool calls use
a line protocol, one `key: value` per line with `name` first. The second
assistant turn of an episode is constrained to an answer-only shape by a
regular expression whose character classes exclude `<`, so a constrained
turn cannot smuggle in another tool call.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .policy import DecisionKind, StructuredDecision

THINK_OPEN = "<think>"

# Shape required of everything after the forced opening think marker on the
# second assistant turn. [^<]* forbids any further tag opening.
SECOND_TURN_BODY_RE = re.compile(r"([^<]*)</think>([^<]*)<answer>([^<]*)</answer>")

_OPEN_TAG_RE = re.compile(r"<(think|tool|result|answer)>")


class SegmentKind(enum.Enum):
    THINK = "think"
    TOOL = "tool"
    RESULT = "result"
    ANSWER = "answer"
    UNTAGGED = "untagged"


class Speaker(enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"
    TOOL_RESULT = "tool"


@dataclass(frozen=True)
class TagSegment:
    """`span` covers the whole block including its tags (or the whole gap for
    untagged text); `content` is the inner text."""

    kind: SegmentKind
    content: str
    span: tuple[int, int]


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    segments: tuple[TagSegment, ...]
    raw: str

    def first(self, kind: SegmentKind) -> TagSegment | None:
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        return None

    def count(self, kind: SegmentKind) -> int:
        return sum(1 for seg in self.segments if seg.kind == kind)


@dataclass
class Transcript:
    turns: list[Turn] = field(default_factory=list)

    def append(self, turn: Turn) -> None:
        self.turns.append(turn)

    def assistant_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker is Speaker.ASSISTANT]

    def result_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker is Speaker.TOOL_RESULT]


def parse_turn(raw: str, speaker: Speaker = Speaker.ASSISTANT) -> Turn:
    """Total parse of one turn. Well-formed blocks become tagged segments;
    unmatched openers and stray text fold into untagged segments. Gaps that
    are pure whitespace are dropped (they are reconstructible as the
    inter-segment whitespace)."""
    segments: list[TagSegment] = []
    gap_start = 0
    search_from = 0
    while True:
        m = _OPEN_TAG_RE.search(raw, search_from)
        if m is None:
            break
        closer = f"</{m.group(1)}>"
        close_at = raw.find(closer, m.end())
        if close_at < 0:
            # Unmatched opener: treat it as plain text and keep scanning.
            search_from = m.end()
            continue
        if raw[gap_start : m.start()].strip():
            segments.append(
                TagSegment(SegmentKind.UNTAGGED, raw[gap_start : m.start()], (gap_start, m.start()))
            )
        stop = close_at + len(closer)
        segments.append(
            TagSegment(SegmentKind(m.group(1)), raw[m.end() : close_at], (m.start(), stop))
        )
        gap_start = stop
        search_from = stop
    if raw[gap_start:].strip():
        segments.append(TagSegment(SegmentKind.UNTAGGED, raw[gap_start:], (gap_start, len(raw))))
    return Turn(speaker=speaker, segments=tuple(segments), raw=raw)


# --- tool-call codec ---


class ToolCallStatus(enum.Enum):
    PARSED_VALID = "parsed_valid"
    PARSE_ERROR = "parse_error"
    UNKNOWN_TOOL = "unknown_tool"
    BAD_ARGS = "bad_args"


@dataclass(frozen=True)
class ToolCall:
    name: str
    args: dict[str, str]
    status: ToolCallStatus

    @property
    def ok(self) -> bool:
        return self.status is ToolCallStatus.PARSED_VALID


@dataclass(frozen=True)
class ArgSpec:
    name: str
    check: Callable[[str], bool] | None = None
    required: bool = True


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    args: tuple[ArgSpec, ...] = ()

    def describe(self) -> str:
        lines = [f"{self.name}: {self.description}"]
        for arg in self.args:
            marker = "required" if arg.required else "optional"
            lines.append(f"  {arg.name} ({marker})")
        return "\n".join(lines)


@dataclass
class ToolRegistry:
    specs: dict[str, ToolSpec] = field(default_factory=dict)

    def register(self, spec: ToolSpec) -> None:
        self.specs[spec.name] = spec

    def get(self, name: str) -> ToolSpec | None:
        return self.specs.get(name)

    def descriptions(self) -> str:
        return "\n".join(spec.describe() for spec in self.specs.values())


_ARG_LINE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(.*?)\s*$")


def parse_tool_call(tool_body: str, registry: ToolRegistry) -> ToolCall:
    """Parse a tool block body. Never raises: malformed lines or a first key
    other than `name` give PARSE_ERROR, unregistered names UNKNOWN_TOOL, and
    missing or ill-typed required arguments BAD_ARGS. Extra arguments are
    tolerated and carried through."""
    pairs: list[tuple[str, str]] = []
    for line in tool_body.splitlines():
        if not line.strip():
            continue
        m = _ARG_LINE_RE.match(line)
        if m is None:
            return ToolCall(name="", args={}, status=ToolCallStatus.PARSE_ERROR)
        pairs.append((m.group(1), m.group(2)))
    if not pairs or pairs[0][0] != "name":
        return ToolCall(name="", args={}, status=ToolCallStatus.PARSE_ERROR)
    name = pairs[0][1]
    args = {key: value for key, value in pairs[1:]}
    spec = registry.get(name)
    if spec is None:
        return ToolCall(name=name, args=args, status=ToolCallStatus.UNKNOWN_TOOL)
    for arg in spec.args:
        if arg.name not in args:
            if arg.required:
                return ToolCall(name=name, args=args, status=ToolCallStatus.BAD_ARGS)
            continue
        if arg.check is not None and not arg.check(args[arg.name]):
            return ToolCall(name=name, args=args, status=ToolCallStatus.BAD_ARGS)
    return ToolCall(name=name, args=args, status=ToolCallStatus.PARSED_VALID)


# --- rendering ---


def render_turn(decision: StructuredDecision, think_text: str) -> str:
    """Serialize a policy decision into protocol text. The output re-parses
    to the same structure (kind, keypoint, answer)."""
    head = f"{THINK_OPEN}{think_text}</think>"
    if decision.kind is DecisionKind.ANSWER:
        if decision.answer is None:
            raise ValueError("answer decision has no answer text")
        return f"{head}\n<answer>{decision.answer}</answer>"
    if decision.kind is DecisionKind.TOOL:
        if decision.keypoint is None:
            raise ValueError("tool decision has no keypoint")
        x, y = decision.keypoint
        return f"{head}\n<tool>\nname: zoom\nkeypoint: {x},{y}\n</tool>"
    raise ValueError(f"decision kind {decision.kind!r} is neither tool nor answer")


def constrain_second_turn(candidate: str) -> bool:
    """True iff `candidate` (the text after the forced opening think marker)
    has the answer-only shape. Used to forbid tool calls on the second turn."""
    return SECOND_TURN_BODY_RE.fullmatch(candidate) is not None


# --- format verdict ---


@dataclass(frozen=True)
class FormatVerdict:
    turn1_ok: bool
    turn2_ok: bool
    answer_present: bool
    violations: tuple[str, ...]

    @property
    def all_ok(self) -> bool:
        return self.turn1_ok and self.turn2_ok and self.answer_present


def _turn1_well_formed(turn: Turn) -> bool:
    if len(turn.segments) != 2:
        return False
    first, second = turn.segments
    return first.kind is SegmentKind.THINK and second.kind in (
        SegmentKind.TOOL,
        SegmentKind.ANSWER,
    )


def validate_format(transcript: Transcript) -> FormatVerdict:
    """Check the two-turn assistant shape: turn 1 is think then exactly one
    tool-or-answer block with nothing stray; turn 2 (when present) matches
    the answer-only constraint; some assistant turn carries an answer."""
    violations: list[str] = []
    assistant = transcript.assistant_turns()
    if not assistant:
        return FormatVerdict(False, False, False, ("no assistant turns",))

    turn1_ok = _turn1_well_formed(assistant[0])
    if not turn1_ok:
        violations.append("first assistant turn is not exactly think + (tool | answer)")

    turn2_ok = True
    if len(assistant) > 1:
        second = assistant[1]
        if not second.raw.startswith(THINK_OPEN):
            turn2_ok = False
            violations.append("second assistant turn lacks the opening think marker")
        elif not constrain_second_turn(second.raw[len(THINK_OPEN) :]):
            turn2_ok = False
            violations.append("second assistant turn violates the answer-only shape")
        for idx, turn in enumerate(assistant[1:], start=2):
            if turn.count(SegmentKind.TOOL):
                if turn2_ok:
                    turn2_ok = False
                violations.append(f"assistant turn {idx} contains a tool call")
    if len(assistant) > 2:
        turn2_ok = False
        violations.append("episode has more than two assistant turns")

    answer_present = any(t.count(SegmentKind.ANSWER) for t in assistant)
    if not answer_present:
        violations.append("no assistant turn contains an answer")
    return FormatVerdict(turn1_ok, turn2_ok, answer_present, tuple(violations))


# --- canonical transcript serialization ---

_MARKER_RE = re.compile(r"^--- (system|user|assistant|tool) ---$")


def dumps_transcript(transcript: Transcript) -> str:
    """Plain-text form: turns separated by a `--- <speaker> ---` line."""
    parts: list[str] = []
    for turn in transcript.turns:
        parts.append(f"--- {turn.speaker.value} ---")
        parts.append(turn.raw)
    return "\n".join(parts) + "\n"


def loads_transcript(text: str) -> Transcript:
    transcript = Transcript()
    speaker: Speaker | None = None
    buffer: list[str] = []

    def flush() -> None:
        if speaker is not None:
            transcript.append(parse_turn("\n".join(buffer), speaker))

    for line in text.split("\n"):
        m = _MARKER_RE.match(line)
        if m:
            flush()
            speaker = Speaker(m.group(1))
            buffer = []
        else:
            buffer.append(line)
    if buffer and buffer[-1] == "":
        buffer.pop()
    flush()
    return transcript
