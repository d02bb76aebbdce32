"""Refactoring taxonomy and before/after refactoring detection."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

from .dockerfile import (
    DockerfileAst,
    ImageRef,
    Instruction,
    Kind,
    SourceSpan,
    functional_fingerprint,
)

EXTRACT_STAGE = "ExtractStage"
INLINE_STAGE = "InlineStage"
INLINE_RUN = "InlineRunInstruction"
SORT_INSTRUCTIONS = "SortInstructions"
UPDATE_IMAGE_TAG = "UpdateImageTag"
UPDATE_BASE_IMAGE = "UpdateBaseImage"
RENAME_IMAGE = "RenameImage"
REPLACE_ADD_WITH_COPY = "ReplaceAddWithCopy"
MERGE_ENV = "MergeEnvInstructions"
MERGE_LABEL = "MergeLabelInstructions"
UNCLASSIFIED = "Unclassified"

BUILTIN_TYPES = (
    EXTRACT_STAGE,
    INLINE_STAGE,
    INLINE_RUN,
    SORT_INSTRUCTIONS,
    UPDATE_IMAGE_TAG,
    UPDATE_BASE_IMAGE,
    RENAME_IMAGE,
)
# recognised, but never allowed to be active
OMITTED_TYPES = ("MoveStage", "ExtractRunInstruction")
ACTIVE_TYPE_COUNT = 10

PARAM_KEYS = {
    EXTRACT_STAGE: ("new_stages",),
    INLINE_STAGE: ("removed_stages",),
    INLINE_RUN: ("merged_count",),
    SORT_INSTRUCTIONS: ("moved_count",),
    UPDATE_IMAGE_TAG: ("image", "old_tag", "new_tag"),
    UPDATE_BASE_IMAGE: ("old_image", "new_image"),
    RENAME_IMAGE: ("old_name", "new_name"),
    REPLACE_ADD_WITH_COPY: ("source",),
    MERGE_ENV: ("merged_count",),
    MERGE_LABEL: ("merged_count",),
    UNCLASSIFIED: ("removed", "added"),
}


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class RefactoringType:
    name: str
    definition: str
    active: bool = True


@dataclass(frozen=True)
class Taxonomy:
    types: tuple[RefactoringType, ...]

    def __post_init__(self):
        names = [t.name for t in self.types]
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        if dupes:
            raise TaxonomyError(f"duplicate refactoring types: {', '.join(dupes)}")
        bad = [t.name for t in self.types if t.active and t.name in OMITTED_TYPES]
        if bad:
            raise TaxonomyError(f"types cannot be active: {', '.join(bad)}")
        if UNCLASSIFIED in names:
            raise TaxonomyError(f"{UNCLASSIFIED} is reserved")
        active = self.active_names
        if len(active) != ACTIVE_TYPE_COUNT:
            raise TaxonomyError(f"expected {ACTIVE_TYPE_COUNT} active types, found {len(active)}")
        missing = [n for n in BUILTIN_TYPES if n not in active]
        if missing:
            raise TaxonomyError(f"built-in types missing or inactive: {', '.join(missing)}")

    @property
    def active_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.types if t.active)

    @property
    def active(self) -> tuple[RefactoringType, ...]:
        return tuple(t for t in self.types if t.active)

    def is_active(self, name: str) -> bool:
        return name in self.active_names


def load_taxonomy(path: str | Path | None = None) -> Taxonomy:
    if path is None:
        text = resources.files("dockrefactor").joinpath("data/taxonomy.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    try:
        doc = json.loads(text)
        entries = doc["types"]
        types = tuple(
            RefactoringType(str(e["name"]), str(e["definition"]), bool(e.get("active", True)))
            for e in entries
        )
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TaxonomyError(f"malformed taxonomy file: {exc}") from None
    return Taxonomy(types)


_DEFAULT_TAXONOMY: Taxonomy | None = None


def default_taxonomy() -> Taxonomy:
    global _DEFAULT_TAXONOMY
    if _DEFAULT_TAXONOMY is None:
        _DEFAULT_TAXONOMY = load_taxonomy()
    return _DEFAULT_TAXONOMY


def action_catalog(taxonomy: Taxonomy | None = None) -> str:
    """Plain-text list of the active refactoring types and their definitions."""
    taxonomy = taxonomy or default_taxonomy()
    lines = ["Refactoring actions you may apply:"]
    lines += [f"- {t.name}: {t.definition}" for t in taxonomy.active]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RefactoringAction:
    type: str
    before_spans: tuple[SourceSpan, ...] = ()
    after_spans: tuple[SourceSpan, ...] = ()
    params: dict = field(default_factory=dict, hash=False)

    def to_json(self) -> dict:
        return {
            "type": self.type,
            "before_spans": [s.to_json() for s in self.before_spans],
            "after_spans": [s.to_json() for s in self.after_spans],
            "params": dict(self.params),
        }

    @classmethod
    def from_json(cls, data: dict) -> "RefactoringAction":
        return cls(
            type=str(data["type"]),
            before_spans=tuple(SourceSpan(*s) for s in data.get("before_spans", ())),
            after_spans=tuple(SourceSpan(*s) for s in data.get("after_spans", ())),
            params=dict(data.get("params", {})),
        )

    def describe(self) -> str:
        if not self.params:
            return self.type
        inner = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.type}({inner})"


# ---------------------------------------------------------------------------
# shell helpers


def split_commands(text: str) -> list[str]:
    """Split a shell command line on top-level ``&&``, normalizing whitespace."""
    parts: list[str] = []
    buf: list[str] = []
    quote = None
    i = 0
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\" and quote == '"' and i + 1 < len(text):
                buf.append(text[i: i + 2])
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in ("'", '"'):
            quote = ch
        elif text.startswith("&&", i):
            parts.append("".join(buf))
            buf = []
            i += 2
            continue
        buf.append(ch)
        i += 1
    parts.append("".join(buf))
    return [" ".join(p.split()) for p in parts if p.strip()]


def key_value_pairs(instr: Instruction) -> list[tuple[str, str]]:
    """Key/value pairs declared by an ENV or LABEL instruction."""
    args = instr.args
    if not args:
        return []
    if "=" not in args[0]:
        return [(args[0], " ".join(args[1:]))]
    pairs = []
    for token in args:
        key, _, value = token.partition("=")
        pairs.append((key, value))
    return pairs


_DOCKER_HUB = ("docker.io", "index.docker.io", "registry-1.docker.io")


def canonical_repository(ref: ImageRef) -> str:
    name = ref.name or ""
    if ref.registry in _DOCKER_HUB or ref.registry is None:
        if name.startswith("library/"):
            name = name[len("library/"):]
        return name.lower()
    return f"{ref.registry}/{name}".lower()


# ---------------------------------------------------------------------------
# detection


@dataclass
class _Item:
    instr: Instruction
    sig: tuple
    matched: bool = False


def _stage_copies(ast: DockerfileAst) -> int:
    count = 0
    for pos, stage in enumerate(ast.stages):
        for instr in stage.body:
            if instr.kind in (Kind.COPY, Kind.ADD) and instr.has_flag("from"):
                if isinstance(ast.resolve_copy_source(pos, instr.flag("from") or ""), int):
                    count += 1
    return count


def _body_keys(ast: DockerfileAst, pos: int) -> Counter:
    return Counter((i.kind, " ".join(i.text.split())) for i in ast.stages[pos].body)


def _align(before: DockerfileAst, after: DockerfileAst) -> dict[int, int]:
    nb, na = len(before.stages), len(after.stages)
    if nb == na:
        return {i: i for i in range(nb)}
    pairs = {nb - 1: na - 1}
    free_b = list(range(nb - 1))
    free_a = list(range(na - 1))
    for bi in list(free_b):
        alias = before.stages[bi].alias
        if alias is None:
            continue
        for ai in free_a:
            other = after.stages[ai].alias
            if other is not None and other.lower() == alias.lower():
                pairs[bi] = ai
                free_b.remove(bi)
                free_a.remove(ai)
                break
    scored = []
    for bi in free_b:
        for ai in free_a:
            overlap = sum((_body_keys(before, bi) & _body_keys(after, ai)).values())
            same_base = before.stages[bi].base.repository == after.stages[ai].base.repository
            score = overlap + (2 if same_base else 0)
            if score > 0:
                scored.append((-score, bi, ai))
    for _, bi, ai in sorted(scored):
        if bi in free_b and ai in free_a:
            pairs[bi] = ai
            free_b.remove(bi)
            free_a.remove(ai)
    return pairs


def _signature(instr: Instruction, ast: DockerfileAst, pos: int, ref: Callable[[int], str]) -> tuple:
    flags = []
    for key, value in instr.flags:
        if key == "from" and value is not None:
            resolved = ast.resolve_copy_source(pos, value)
            value = ref(resolved) if isinstance(resolved, int) else f"image:{resolved}"
        flags.append((key, value))
    if instr.kind is Kind.RUN:
        text = " ".join(instr.text.split())
    else:
        text = " ".join(instr.args)
    return (instr.kind, text, tuple(sorted(flags, key=lambda kv: kv[0])))


def _spans(instrs) -> tuple[SourceSpan, ...]:
    return tuple(i.span for i in instrs if i.span is not None)


def _stage_span(ast: DockerfileAst, pos: int) -> tuple[SourceSpan, ...]:
    spans = _spans(ast.stages[pos].instructions)
    if not spans:
        return ()
    return (SourceSpan(spans[0].start_line, max(s.end_line for s in spans)),)


def _tag_text(ref: ImageRef) -> str:
    if ref.digest is not None:
        return f"@{ref.digest}"
    return ref.tag if ref.tag is not None else "latest"


def _compare_bases(before, after, bi, ai, same_shape) -> list[RefactoringAction]:
    bstage, astage = before.stages[bi], after.stages[ai]
    b, a = bstage.base, astage.base
    bspan, aspan = _spans([bstage.from_instruction]), _spans([astage.from_instruction])
    out = []
    if b.stage_alias is not None or a.stage_alias is not None:
        if b.stage_alias is not None and a.stage_alias is not None:
            pass  # stage-to-stage inheritance, compared through the alignment
        else:
            out.append(RefactoringAction(UPDATE_BASE_IMAGE, bspan, aspan,
                                         {"old_image": str(b), "new_image": str(a)}))
    elif canonical_repository(b) != canonical_repository(a):
        out.append(RefactoringAction(UPDATE_BASE_IMAGE, bspan, aspan,
                                     {"old_image": str(b), "new_image": str(a)}))
    else:
        if b.repository != a.repository:
            out.append(RefactoringAction(RENAME_IMAGE, bspan, aspan,
                                         {"old_name": b.repository, "new_name": a.repository}))
        if (b.tag, b.digest) != (a.tag, a.digest):
            out.append(RefactoringAction(UPDATE_IMAGE_TAG, bspan, aspan,
                                         {"image": a.repository, "old_tag": _tag_text(b),
                                          "new_tag": _tag_text(a)}))
    old_alias, new_alias = bstage.alias, astage.alias
    if old_alias != new_alias and (same_shape or (old_alias is not None and new_alias is not None)):
        out.append(RefactoringAction(RENAME_IMAGE, bspan, aspan,
                                     {"old_name": old_alias or "", "new_name": new_alias or ""}))
    return out


def _match_merges(b_items, a_items, kind, type_name, combine) -> list[RefactoringAction]:
    """Find k>=2 adjacent ``kind`` instructions in before folded into one in after."""
    out = []
    for a in a_items:
        if a.matched or a.instr.kind is not kind:
            continue
        target = combine(a.instr)
        if len(target) < 2:
            continue
        for start in range(len(b_items)):
            window = []
            acc: list = []
            for b in b_items[start:]:
                if b.matched or b.instr.kind is not kind:
                    break
                window.append(b)
                acc += combine(b.instr)
                if len(acc) >= len(target):
                    break
            if len(window) >= 2 and acc == target:
                for b in window:
                    b.matched = True
                a.matched = True
                out.append(RefactoringAction(
                    type_name,
                    _spans(b.instr for b in window),
                    _spans([a.instr]),
                    {"merged_count": len(window)},
                ))
                break
    return out


def _match_add_to_copy(b_items, a_items) -> list[RefactoringAction]:
    out = []
    for b in b_items:
        if b.matched or b.instr.kind is not Kind.ADD:
            continue
        for a in a_items:
            if a.matched or a.instr.kind is not Kind.COPY:
                continue
            if a.sig[1:] == b.sig[1:]:
                b.matched = a.matched = True
                pairs = b.instr.args[0] if b.instr.args else ""
                out.append(RefactoringAction(REPLACE_ADD_WITH_COPY, _spans([b.instr]),
                                             _spans([a.instr]), {"source": pairs}))
                break
    return out


def _compare_bodies(before, after, bi, ai, ref_b, ref_a, fingerprint_equal,
                    moved_in: Counter, moved_out: Counter) -> list[RefactoringAction]:
    b_items = [_Item(i, _signature(i, before, bi, ref_b)) for i in before.stages[bi].body]
    a_items = [_Item(i, _signature(i, after, ai, ref_a)) for i in after.stages[ai].body]

    # exact matches first, so only genuinely changed instructions take part in merges
    b_count = Counter(x.sig for x in b_items)
    a_count = Counter(x.sig for x in a_items)
    common = b_count & a_count
    b_left, a_left = Counter(common), Counter(common)
    for x in b_items:
        if b_left[x.sig] > 0:
            b_left[x.sig] -= 1
            x.matched = True
    for x in a_items:
        if a_left[x.sig] > 0:
            a_left[x.sig] -= 1
            x.matched = True
    b_common_order = [x.sig for x in b_items if x.matched]
    a_common_order = [x.sig for x in a_items if x.matched]

    actions: list[RefactoringAction] = []
    actions += _match_merges(b_items, a_items, Kind.RUN, INLINE_RUN, lambda i: split_commands(i.text))
    actions += _match_merges(b_items, a_items, Kind.ENV, MERGE_ENV, key_value_pairs)
    actions += _match_merges(b_items, a_items, Kind.LABEL, MERGE_LABEL, key_value_pairs)
    actions += _match_add_to_copy(b_items, a_items)

    if b_common_order != a_common_order:
        moved = sum(1 for x, y in zip(b_common_order, a_common_order) if x != y)
        b_moved = [x.instr for x in b_items if x.matched and x.sig in common]
        a_moved = [x.instr for x in a_items if x.matched and x.sig in common]
        kind = SORT_INSTRUCTIONS if fingerprint_equal else UNCLASSIFIED
        params = {"moved_count": moved} if fingerprint_equal else {"removed": 0, "added": 0}
        actions.append(RefactoringAction(kind, _spans(b_moved), _spans(a_moved), params))

    removed = [x for x in b_items if not x.matched]
    added = [x for x in a_items if not x.matched]
    removed = _discount(removed, moved_in)
    added = _discount(added, moved_out)
    if removed or added:
        actions.append(RefactoringAction(
            UNCLASSIFIED, _spans(x.instr for x in removed), _spans(x.instr for x in added),
            {"removed": len(removed), "added": len(added)},
        ))
    return actions


def _discount(items: list[_Item], pool: Counter) -> list[_Item]:
    """Drop items explained by instructions moving to or from another stage."""
    pool = Counter(pool)
    kept = []
    for x in items:
        key = (x.instr.kind, " ".join(x.instr.text.split()))
        if pool[key] > 0:
            pool[key] -= 1
            continue
        if x.instr.kind in (Kind.COPY, Kind.ADD) and x.instr.has_flag("from") and pool.get("stage-copy"):
            continue
        kept.append(x)
    return kept


def detect_refactorings(before: DockerfileAst, after: DockerfileAst,
                        taxonomy: Taxonomy | None = None) -> list[RefactoringAction]:
    """Classify the differences between two versions of a Dockerfile.

    Types that are not active in ``taxonomy`` are reported as ``Unclassified``.
    """
    if before == after:
        return []
    taxonomy = taxonomy or default_taxonomy()
    align = _align(before, after)
    nb, na = len(before.stages), len(after.stages)
    same_shape = nb == na
    fingerprint_equal = functional_fingerprint(before) == functional_fingerprint(after)

    def ref_b(i: int) -> str:
        return f"s{align[i]}" if i in align else f"b{i}"

    def ref_a(j: int) -> str:
        return f"s{j}"

    actions: list[RefactoringAction] = []
    unaligned_a = [j for j in range(na) if j not in align.values()]
    unaligned_b = [i for i in range(nb) if i not in align]
    moved_in: Counter = Counter()   # explains instructions missing from aligned after stages
    moved_out: Counter = Counter()  # explains instructions new in aligned after stages
    if na > nb:
        if _stage_copies(after) > _stage_copies(before):
            names = [after.stages[j].alias or str(j) for j in unaligned_a]
            spans = tuple(s for j in unaligned_a for s in _stage_span(after, j))
            actions.append(RefactoringAction(EXTRACT_STAGE, _stage_span(before, nb - 1), spans,
                                             {"new_stages": ",".join(names)}))
            moved_out["stage-copy"] = 1
        for j in unaligned_a:
            moved_in += _body_keys(after, j)
    elif na < nb:
        if _stage_copies(after) < _stage_copies(before):
            names = [before.stages[i].alias or str(i) for i in unaligned_b]
            spans = tuple(s for i in unaligned_b for s in _stage_span(before, i))
            actions.append(RefactoringAction(INLINE_STAGE, spans, _stage_span(after, na - 1),
                                             {"removed_stages": ",".join(names)}))
            moved_in["stage-copy"] = 1
        for i in unaligned_b:
            moved_out += _body_keys(before, i)
    if nb != na and not actions:
        actions.append(RefactoringAction(
            UNCLASSIFIED,
            tuple(s for i in unaligned_b for s in _stage_span(before, i)),
            tuple(s for j in unaligned_a for s in _stage_span(after, j)),
            {"removed": len(unaligned_b), "added": len(unaligned_a)},
        ))

    for bi, ai in sorted(align.items()):
        actions += _compare_bases(before, after, bi, ai, same_shape)
        actions += _compare_bodies(before, after, bi, ai, ref_b, ref_a, fingerprint_equal,
                                   moved_in, moved_out)

    if list(before.global_args) != list(after.global_args):
        actions.append(RefactoringAction(
            UNCLASSIFIED, _spans(before.global_args), _spans(after.global_args),
            {"removed": len(before.global_args), "added": len(after.global_args)},
        ))

    out = []
    for action in actions:
        if action.type != UNCLASSIFIED and not taxonomy.is_active(action.type):
            action = RefactoringAction(UNCLASSIFIED, action.before_spans, action.after_spans,
                                       {"removed": len(action.before_spans),
                                        "added": len(action.after_spans)})
        out.append(action)
    return sorted(out, key=_action_order)


def _action_order(action: RefactoringAction):
    first_b = action.before_spans[0].start_line if action.before_spans else 0
    first_a = action.after_spans[0].start_line if action.after_spans else 0
    return (first_b, first_a, action.type, json.dumps(action.params, sort_keys=True))
