"""Dockerfile parsing, serialization and static fingerprints.

The AST keeps the verbatim source of every instruction so that an unmodified
tree serializes back to its input byte for byte, while edited instructions
are re-rendered in a canonical single-line form.
"""

from __future__ import annotations

import enum
import functools
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator


class Kind(str, enum.Enum):
    FROM = "FROM"
    RUN = "RUN"
    COPY = "COPY"
    ADD = "ADD"
    ENV = "ENV"
    ARG = "ARG"
    WORKDIR = "WORKDIR"
    CMD = "CMD"
    ENTRYPOINT = "ENTRYPOINT"
    EXPOSE = "EXPOSE"
    LABEL = "LABEL"
    USER = "USER"
    VOLUME = "VOLUME"
    HEALTHCHECK = "HEALTHCHECK"
    SHELL = "SHELL"
    ONBUILD = "ONBUILD"
    STOPSIGNAL = "STOPSIGNAL"
    MAINTAINER = "MAINTAINER"

    def __str__(self) -> str:
        return self.value


KEYWORDS = frozenset(k.value for k in Kind)

# Instructions whose argument text is kept verbatim as a single payload.
RAW_KINDS = frozenset({Kind.RUN, Kind.CMD, Kind.ENTRYPOINT, Kind.HEALTHCHECK, Kind.SHELL, Kind.ONBUILD})
FLAG_KINDS = frozenset({Kind.FROM, Kind.RUN, Kind.COPY, Kind.ADD, Kind.HEALTHCHECK})

_FLAG_RE = re.compile(r"--([A-Za-z][A-Za-z0-9_-]*)(?:=(.*))?\Z", re.DOTALL)
_TOKEN_RE = re.compile(r"""(?:[^\s"']+|"(?:\\.|[^"\\])*"?|'[^']*'?)+""")
_DIRECTIVE_RE = re.compile(r"#\s*([A-Za-z]+)\s*=\s*(\S+)\s*$")
_HEREDOC_RE = re.compile(r"<<(-?)([\"']?)([A-Za-z_][A-Za-z0-9_]*)\2")


class DockerfileSyntaxError(ValueError):
    """Raised when Dockerfile text cannot be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class SourceSpan:
    start_line: int
    end_line: int

    def __post_init__(self):
        if self.start_line < 1 or self.end_line < self.start_line:
            raise ValueError(f"invalid span {self.start_line}-{self.end_line}")

    def to_json(self) -> list[int]:
        return [self.start_line, self.end_line]


@dataclass(frozen=True)
class ImageRef:
    name: str | None = None
    tag: str | None = None
    digest: str | None = None
    registry: str | None = None
    stage_alias: str | None = None

    def __post_init__(self):
        if self.stage_alias is None and not self.name:
            raise ValueError("image reference needs a name or a stage alias")
        if self.stage_alias is not None and self.name:
            raise ValueError("image reference cannot be both a name and a stage alias")
        if self.tag is not None and self.digest is not None:
            raise ValueError("image reference cannot carry both a tag and a digest")

    @classmethod
    def parse(cls, text: str, stage_aliases: Iterable[str] = ()) -> "ImageRef":
        aliases = {a.lower() for a in stage_aliases}
        if text.lower() in aliases:
            return cls(stage_alias=text)
        rest, digest = text, None
        if "@" in rest:
            rest, digest = rest.split("@", 1)
        tag = None
        slash = rest.rfind("/")
        colon = rest.rfind(":")
        if colon > slash:
            rest, tag = rest[:colon], rest[colon + 1:]
        registry = None
        first, sep, remainder = rest.partition("/")
        if sep and ("." in first or ":" in first or first == "localhost"):
            registry, rest = first, remainder
        return cls(name=rest, tag=tag, digest=digest, registry=registry)

    @property
    def repository(self) -> str:
        """Registry-qualified repository path, without tag or digest."""
        if self.stage_alias is not None:
            return self.stage_alias
        return f"{self.registry}/{self.name}" if self.registry else str(self.name)

    def __str__(self) -> str:
        if self.stage_alias is not None:
            return self.stage_alias
        out = self.repository
        if self.tag is not None:
            out += f":{self.tag}"
        if self.digest is not None:
            out += f"@{self.digest}"
        return out


@dataclass(frozen=True)
class Instruction:
    kind: Kind
    args: tuple[str, ...] = ()
    flags: tuple[tuple[str, str | None], ...] = ()
    span: SourceSpan | None = field(default=None, compare=False)
    raw: str | None = field(default=None, compare=False, repr=False)

    def flag(self, name: str, default: str | None = None) -> str | None:
        for key, value in self.flags:
            if key == name:
                return value
        return default

    def has_flag(self, name: str) -> bool:
        return any(key == name for key, _ in self.flags)

    @property
    def text(self) -> str:
        """Argument text with flags removed."""
        return " ".join(self.args)

    def render(self) -> str:
        parts = [self.kind.value]
        for key, value in self.flags:
            parts.append(f"--{key}" if value is None else f"--{key}={value}")
        if self.args:
            parts.append(" ".join(self.args))
        return " ".join(parts)

    def with_args(self, *args: str) -> "Instruction":
        return replace(self, args=tuple(args))


@dataclass(frozen=True)
class Comment:
    span: SourceSpan = field(compare=False)
    text: str


@dataclass(frozen=True)
class Stage:
    base: ImageRef
    alias: str | None
    instructions: tuple[Instruction, ...]

    @property
    def from_instruction(self) -> Instruction:
        return self.instructions[0]

    @property
    def body(self) -> tuple[Instruction, ...]:
        """Instructions after the FROM line."""
        return self.instructions[1:]

    def with_base(self, base: ImageRef) -> "Stage":
        head = self.instructions[0]
        args = (str(base),) + head.args[1:]
        return replace(self, base=base, instructions=(head.with_args(*args),) + self.instructions[1:])


@dataclass(frozen=True)
class DockerfileAst:
    stages: tuple[Stage, ...]
    global_args: tuple[Instruction, ...] = ()
    comments: tuple[Comment, ...] = ()
    raw_text: str = field(default="", compare=False, repr=False)
    escape: str = field(default="\\", compare=False)

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a Dockerfile needs at least one stage")

    @property
    def final_stage(self) -> Stage:
        return self.stages[-1]

    def instructions(self) -> Iterator[Instruction]:
        yield from self.global_args
        for stage in self.stages:
            yield from stage.instructions

    def stage_index(self, alias: str) -> int | None:
        for i, stage in enumerate(self.stages):
            if stage.alias is not None and stage.alias.lower() == alias.lower():
                return i
        return None

    def resolve_copy_source(self, stage_pos: int, value: str) -> int | ImageRef:
        """Resolve a ``--from`` value used in stage ``stage_pos``.

        Returns the index of an earlier stage, or an ``ImageRef`` when the
        value names an external image.
        """
        if value.isdigit():
            return int(value)
        idx = self.stage_index(value)
        if idx is not None and idx < stage_pos:
            return idx
        return ImageRef.parse(value)

    def replace_stage(self, index: int, stage: Stage) -> "DockerfileAst":
        stages = list(self.stages)
        stages[index] = stage
        return replace(self, stages=tuple(stages))


# ---------------------------------------------------------------------------
# parsing


@dataclass
class _Logical:
    start: int
    end: int
    text: str


def _split_tokens(text: str) -> tuple[str, ...]:
    return tuple(_TOKEN_RE.findall(text))


def _directives(lines: list[str]) -> dict[str, str]:
    found: dict[str, str] = {}
    for line in lines:
        m = _DIRECTIVE_RE.match(line.strip())
        if not m:
            break
        found[m.group(1).lower()] = m.group(2)
    return found


def _continues(content: str, escape: str) -> tuple[bool, str]:
    stripped = content.rstrip(" \t")
    if stripped.endswith(escape):
        return True, stripped[: -len(escape)]
    return False, content


def _scan(lines: list[str], escape: str) -> tuple[list[_Logical], list[Comment]]:
    logical: list[_Logical] = []
    comments: list[Comment] = []
    i, n = 0, len(lines)
    while i < n:
        content = lines[i].rstrip("\r\n")
        stripped = content.strip()
        if not stripped:
            i += 1
            continue
        if stripped.startswith("#"):
            comments.append(Comment(SourceSpan(i + 1, i + 1), stripped))
            i += 1
            continue
        start = i
        more, piece = _continues(content, escape)
        pieces = [piece]
        while more and i + 1 < n:
            i += 1
            nxt = lines[i].rstrip("\r\n")
            if not nxt.strip():
                continue
            if nxt.lstrip().startswith("#"):
                comments.append(Comment(SourceSpan(i + 1, i + 1), nxt.strip()))
                continue
            more, piece = _continues(nxt, escape)
            pieces.append(piece)
        text = "".join(pieces).strip()
        # heredoc bodies are kept opaque, terminated by their delimiter line
        word = text.split(None, 1)[0].upper() if text else ""
        if word in ("RUN", "COPY", "ADD"):
            for m in _HEREDOC_RE.finditer(text):
                strip_tabs, delim = m.group(1) == "-", m.group(3)
                body = []
                while i + 1 < n:
                    i += 1
                    body_line = lines[i].rstrip("\r\n")
                    body.append(body_line)
                    check = body_line.lstrip("\t") if strip_tabs else body_line
                    if check == delim:
                        break
                text = text + "\n" + "\n".join(body)
        logical.append(_Logical(start + 1, i + 1, text))
        i += 1
    return logical, comments


def _parse_flags(rest: str, line: int) -> tuple[tuple[tuple[str, str | None], ...], str]:
    flags = []
    while rest.startswith("--"):
        head, _, tail = rest.partition(" ")
        # a newline inside the flag token only happens with heredocs
        head, nl, extra = head.partition("\n")
        if nl:
            tail = "\n" + extra + (" " + tail if tail else "")
        m = _FLAG_RE.match(head)
        if not m:
            raise DockerfileSyntaxError(line, f"malformed flag: {head!r}")
        flags.append((m.group(1), m.group(2)))
        rest = tail.lstrip(" \t")
    return tuple(flags), rest


def _parse_instruction(text: str, line: int) -> Instruction:
    keyword, _, rest = text.partition(" ")
    if "\t" in keyword:
        keyword, _, more = keyword.partition("\t")
        rest = more + " " + rest if rest else more
    if "\n" in keyword:
        keyword, _, more = keyword.partition("\n")
        rest = "\n" + more + (" " + rest if rest else "")
    upper = keyword.upper()
    if upper not in KEYWORDS:
        raise DockerfileSyntaxError(line, f"unknown instruction: {keyword}")
    kind = Kind(upper)
    rest = rest.strip(" \t")
    flags: tuple[tuple[str, str | None], ...] = ()
    if kind in FLAG_KINDS:
        flags, rest = _parse_flags(rest, line)
    if kind in RAW_KINDS:
        args = (rest,) if rest else ()
    else:
        args = _split_tokens(rest)
    return Instruction(kind, args, flags)


def _instruction_from(logical: _Logical, lines: list[str]) -> Instruction:
    instr = _parse_instruction(logical.text, logical.start)
    raw = "".join(lines[logical.start - 1: logical.end])
    return replace(instr, span=SourceSpan(logical.start, logical.end), raw=raw)


def parse(text: str) -> DockerfileAst:
    """Parse Dockerfile source into a :class:`DockerfileAst`."""
    lines = text.splitlines(keepends=True)
    directives = _directives(lines)
    escape = directives.get("escape", "\\")
    if escape not in ("\\", "`"):
        raise DockerfileSyntaxError(1, f"invalid escape token {escape!r}")
    logical, comments = _scan(lines, escape)

    global_args: list[Instruction] = []
    stages: list[Stage] = []
    current: list[Instruction] = []
    base: ImageRef | None = None
    alias: str | None = None
    aliases: list[str] = []

    def close_stage():
        if base is not None:
            stages.append(Stage(base, alias, tuple(current)))

    for item in logical:
        instr = _instruction_from(item, lines)
        if instr.kind is Kind.FROM:
            close_stage()
            base, alias = _from_parts(instr, aliases, item.start)
            if alias is not None:
                if alias.lower() in {a.lower() for a in aliases}:
                    raise DockerfileSyntaxError(item.start, f"duplicate stage name {alias!r}")
                aliases.append(alias)
            current = [instr]
            continue
        if base is None:
            if instr.kind is Kind.ARG:
                global_args.append(instr)
                continue
            raise DockerfileSyntaxError(item.start, f"{instr.kind} before the first FROM")
        if instr.kind in (Kind.COPY, Kind.ADD) and instr.has_flag("from"):
            _check_stage_source(instr, len(stages), item.start)
        current.append(instr)
    close_stage()

    if not stages:
        raise DockerfileSyntaxError(max(len(lines), 1), "no FROM instruction")
    return DockerfileAst(tuple(stages), tuple(global_args), tuple(comments), text, escape)


def _from_parts(instr: Instruction, aliases: list[str], line: int) -> tuple[ImageRef, str | None]:
    args = instr.args
    if not args:
        raise DockerfileSyntaxError(line, "FROM requires an image")
    if len(args) == 1:
        alias = None
    elif len(args) == 3 and args[1].upper() == "AS":
        alias = args[2]
    else:
        raise DockerfileSyntaxError(line, "FROM takes an image and an optional 'AS name'")
    try:
        ref = ImageRef.parse(args[0], aliases)
    except ValueError as exc:
        raise DockerfileSyntaxError(line, str(exc)) from None
    return ref, alias


def _check_stage_source(instr: Instruction, stage_pos: int, line: int) -> None:
    value = instr.flag("from")
    if not value:
        raise DockerfileSyntaxError(line, "--from requires a value")
    if value.isdigit() and int(value) >= stage_pos:
        raise DockerfileSyntaxError(line, f"--from={value} does not name an earlier stage")


# ---------------------------------------------------------------------------
# serialization


@functools.lru_cache(maxsize=256)
def _covered_lines(raw_text: str) -> frozenset[int]:
    lines = raw_text.splitlines(keepends=True)
    escape = _directives(lines).get("escape", "\\")
    logical, _ = _scan(lines, escape)
    return frozenset(ln for item in logical for ln in range(item.start, item.end + 1))


def _is_pristine(instr: Instruction, escape: str) -> bool:
    if instr.raw is None or instr.span is None:
        return False
    try:
        logical, _ = _scan(instr.raw.splitlines(keepends=True), escape)
        if len(logical) != 1:
            return False
        return _parse_instruction(logical[0].text, 1) == instr
    except DockerfileSyntaxError:
        return False


def serialize(ast: DockerfileAst) -> str:
    """Render an AST back to Dockerfile text.

    Comments, blank lines and untouched instructions are copied from
    ``raw_text``; edited or inserted instructions are rendered canonically.
    """
    lines = ast.raw_text.splitlines(keepends=True)
    covered = _covered_lines(ast.raw_text) if ast.raw_text else frozenset()
    chunks: list[str] = []
    pos = 1

    def flush(upto: int):
        for ln in range(pos, upto):
            if ln not in covered:
                chunks.append(lines[ln - 1])

    for instr in ast.instructions():
        span = instr.span
        anchored = (
            span is not None
            and instr.raw is not None
            and span.end_line <= len(lines)
            and "".join(lines[span.start_line - 1: span.end_line]) == instr.raw
        )
        if anchored and span.start_line >= pos:
            flush(span.start_line)
            pos = span.end_line + 1
        if anchored and _is_pristine(instr, ast.escape):
            chunks.append(instr.raw)
        else:
            chunks.append(instr.render() + "\n")
    flush(len(lines) + 1)

    out = []
    for i, chunk in enumerate(chunks):
        if i < len(chunks) - 1 and not chunk.endswith("\n"):
            chunk += "\n"
        out.append(chunk)
    return "".join(out)


# ---------------------------------------------------------------------------
# functional fingerprint


@dataclass(frozen=True)
class FunctionalFingerprint:
    copy_add_entries: frozenset[tuple[str, str]]
    cmd: tuple[str, ...] | None
    entrypoint: tuple[str, ...] | None

    @property
    def startup(self) -> tuple[tuple[str, ...] | None, tuple[str, ...] | None]:
        return self.cmd, self.entrypoint

    def to_json(self) -> dict:
        return {
            "copy_add_entries": sorted(list(pair) for pair in self.copy_add_entries),
            "cmd": list(self.cmd) if self.cmd is not None else None,
            "entrypoint": list(self.entrypoint) if self.entrypoint is not None else None,
        }


def exec_form(text: str) -> tuple[str, ...]:
    """Normalize CMD/ENTRYPOINT argument text to an exec-form token list."""
    stripped = text.strip()
    if stripped.startswith("["):
        try:
            value = json.loads(stripped)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return tuple(value)
    return ("/bin/sh", "-c", stripped)


def copy_pairs(instr: Instruction) -> list[tuple[str, str]]:
    """(source, destination) pairs named by a COPY/ADD instruction."""
    text = instr.text.strip()
    if "\n" in text:
        # heredoc form: the first line holds the sources and destination
        text = text.split("\n", 1)[0]
    tokens: list[str] | None = None
    if text.startswith("["):
        try:
            value = json.loads(text)
            if isinstance(value, list):
                tokens = [str(v) for v in value]
        except json.JSONDecodeError:
            tokens = None
    if tokens is None:
        tokens = list(_split_tokens(text))
    if len(tokens) < 2:
        return []
    *sources, dest = tokens
    return [(src, dest) for src in sources]


def functional_fingerprint(ast: DockerfileAst) -> FunctionalFingerprint:
    final = ast.final_stage
    entries: set[tuple[str, str]] = set()
    cmd = entrypoint = None
    for instr in final.body:
        if instr.kind in (Kind.COPY, Kind.ADD) and not instr.has_flag("from"):
            entries.update(copy_pairs(instr))
        elif instr.kind is Kind.CMD:
            cmd = exec_form(instr.text)
        elif instr.kind is Kind.ENTRYPOINT:
            entrypoint = exec_form(instr.text)
    return FunctionalFingerprint(frozenset(entries), cmd, entrypoint)


# ---------------------------------------------------------------------------
# token estimation

_PIECE_RE = re.compile(r"[^\W\d_]+|[0-9]+|[^\s\w]+|_+")
# characters per token, calibrated against a GPT-4o class BPE vocabulary
_LETTERS_PER_TOKEN = 8
_DIGITS_PER_TOKEN = 3
_SYMBOLS_PER_TOKEN = 2


def estimate_tokens(text: str) -> int:
    """Approximate the number of LLM tokens in ``text``.

    Text is split into letter runs, digit runs and symbol runs; each run
    costs one token per started chunk of its class width. Whitespace is
    free, so the count is additive over whitespace-separated concatenation.
    """
    total = 0
    for piece in _PIECE_RE.findall(text):
        first = piece[0]
        if first.isalpha():
            width = _LETTERS_PER_TOKEN
        elif first.isdigit():
            width = _DIGITS_PER_TOKEN
        else:
            width = _SYMBOLS_PER_TOKEN
        total += -(-len(piece) // width)
    return total
