"""Prompt assembly under a context-window budget."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import Demonstration
from .dockerfile import DockerfileAst, estimate_tokens, serialize
from .refactorings import RefactoringAction, Taxonomy, action_catalog
from .retrieval import ScoreBreakdown

_SLOT_RE = re.compile(r"\{\{(\w+)\}\}")
_SECTION_RE = re.compile(r"^=== (\w+) ===\n", re.MULTILINE)
DEMO_SLOTS = ("v_before", "v_after", "actions")
QUERY_SLOTS = ("query",)
DEFAULT_SHOT_CAP = 50


class TemplateError(ValueError):
    pass


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    task_description: str
    action_catalog: str
    demo_format: str
    query_format: str
    system: str = ""

    def __post_init__(self):
        _check_slots("demo", self.demo_format, DEMO_SLOTS)
        _check_slots("query", self.query_format, QUERY_SLOTS)

    @property
    def header(self) -> str:
        return f"{self.task_description.strip()}\n\n{self.action_catalog.strip()}\n"

    @property
    def header_tokens(self) -> int:
        return estimate_tokens(self.header)


def _check_slots(name: str, skeleton: str, required: Sequence[str]) -> None:
    found = _SLOT_RE.findall(skeleton)
    for slot in required:
        if found.count(slot) != 1:
            raise TemplateError(f"{name} format must contain {{{{{slot}}}}} exactly once")
    extra = sorted(set(found) - set(required))
    if extra:
        raise TemplateError(f"{name} format has unknown slots: {', '.join(extra)}")


def _fill(skeleton: str, values: dict[str, str]) -> str:
    return _SLOT_RE.sub(lambda m: values[m.group(1)], skeleton)


def parse_template(text: str, catalog: str) -> PromptTemplate:
    """Parse a template file made of ``=== name ===`` sections."""
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[m.group(1)] = text[m.end():end].strip("\n")
    for required in ("task", "demo", "query"):
        if required not in sections:
            raise TemplateError(f"template is missing the '{required}' section")
    return PromptTemplate(
        task_description=sections["task"],
        action_catalog=catalog,
        demo_format=sections["demo"],
        query_format=sections["query"],
        system=sections.get("system", ""),
    )


def load_template(path: str | Path | None = None, taxonomy: Taxonomy | None = None) -> PromptTemplate:
    if path is None:
        text = resources.files("dockrefactor").joinpath("data/template.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_template(text, action_catalog(taxonomy))


@dataclass(frozen=True)
class AssembledPrompt:
    text: str
    shots: int
    token_estimate: int
    demo_ids: tuple[str, ...]
    system: str = ""


def max_shots(context_window: int, template_tokens: int, per_demo_tokens: int,
              query_tokens: int, cap: int | None = None) -> int:
    """How many demonstrations of ``per_demo_tokens`` fit next to the template and query."""
    if min(context_window, template_tokens, per_demo_tokens, query_tokens) < 0:
        raise ValueError("token counts must be non-negative")
    room = context_window - template_tokens - query_tokens
    if room < 0:
        raise BudgetError(
            f"template ({template_tokens}) and query ({query_tokens}) exceed the window ({context_window})")
    if per_demo_tokens == 0:
        if cap is None:
            raise ValueError("per_demo_tokens must be positive without a cap")
        return cap
    shots = room // per_demo_tokens
    return shots if cap is None else min(shots, cap)


def render_actions(actions: Sequence[RefactoringAction]) -> str:
    if not actions:
        return "- (none)"
    return "\n".join(f"- {a.describe()}" for a in actions)


def render_demo(template: PromptTemplate, demo: Demonstration) -> str:
    return _fill(template.demo_format, {
        "v_before": demo.v_before.rstrip("\n"),
        "v_after": demo.v_after.rstrip("\n"),
        "actions": render_actions(demo.actions),
    })


def render_query(template: PromptTemplate, query: DockerfileAst | str) -> str:
    text = query if isinstance(query, str) else serialize(query)
    return _fill(template.query_format, {"query": text.rstrip("\n")})


def _compose(template: PromptTemplate, blocks: Sequence[str], query_block: str) -> str:
    parts = [template.header]
    parts += [block + "\n" for block in blocks]
    parts.append(query_block + "\n")
    return "\n".join(parts)


def assemble(
    template: PromptTemplate,
    selected: Sequence[tuple[Demonstration, ScoreBreakdown]],
    query: DockerfileAst | str,
    window: int,
) -> AssembledPrompt:
    """Compose header, demonstrations (in the given ascending order) and query.

    When the estimate exceeds ``window``, demonstrations are dropped from the
    front, i.e. lowest scores first.
    """
    query_block = render_query(template, query)
    blocks = [render_demo(template, demo) for demo, _ in selected]
    ids = [demo.id for demo, _ in selected]
    while True:
        text = _compose(template, blocks, query_block)
        tokens = estimate_tokens(template.system) + estimate_tokens(text)
        if tokens <= window:
            return AssembledPrompt(text, len(blocks), tokens, tuple(ids), template.system)
        if not blocks:
            raise BudgetError(f"zero-shot prompt needs ~{tokens} tokens, window is {window}")
        blocks.pop(0)
        ids.pop(0)
