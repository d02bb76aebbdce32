"""Demonstration corpus: JSON Lines storage, validation, ingestion and BM25 statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .build import BuildResult
from .dockerfile import DockerfileAst, DockerfileSyntaxError, functional_fingerprint, parse
from .quality import build_duration_score, image_size_score
from .refactorings import RefactoringAction, detect_refactorings

log = logging.getLogger(__name__)

SAR_PATTERNS = tuple(re.compile(p, re.IGNORECASE) for p in ("refactor.*", "fix.*", "improve.*"))
_DOCKERFILE_WORD = re.compile(r"\bdockerfile", re.IGNORECASE)
_TERM_RE = re.compile(r"[\w.\-]+(?:[:/=@][\w.\-]+)*")


class CorpusError(ValueError):
    pass


class IngestRejection(ValueError):
    """A before/after pair failed one of the ingestion filters."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


def tokenize(text: str) -> list[str]:
    """Lower-cased BM25 terms; image refs, paths and flag assignments stay whole."""
    return _TERM_RE.findall(text.lower())


def is_sar_candidate(message: str) -> bool:
    """True for commit messages that self-affirm a refactoring of a Dockerfile."""
    return any(p.search(message) for p in SAR_PATTERNS) and bool(_DOCKERFILE_WORD.search(message))


@dataclass(frozen=True)
class QualityAnnotation:
    understandability: int
    maintainability: int
    image_size_before_mb: float
    image_size_after_mb: float
    build_duration_before_s: float
    build_duration_after_s: float

    def __post_init__(self):
        for name in ("understandability", "maintainability"):
            value = getattr(self, name)
            if isinstance(value, bool) or value not in (-1, 0, 1):
                raise ValueError(f"{name} must be -1, 0 or 1, got {value!r}")
        for name in ("image_size_before_mb", "image_size_after_mb",
                     "build_duration_before_s", "build_duration_after_s"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ValueError(f"{name} must be a positive number, got {value!r}")

    @property
    def image_size_score(self) -> float:
        return image_size_score(self.image_size_before_mb, self.image_size_after_mb)

    @property
    def build_duration_score(self) -> float:
        return build_duration_score(self.build_duration_before_s, self.build_duration_after_s)

    def to_json(self) -> dict:
        return {
            "understandability": self.understandability,
            "maintainability": self.maintainability,
            "image_size_before_mb": self.image_size_before_mb,
            "image_size_after_mb": self.image_size_after_mb,
            "build_duration_before_s": self.build_duration_before_s,
            "build_duration_after_s": self.build_duration_after_s,
        }


@dataclass(frozen=True)
class Demonstration:
    id: str
    project: str
    commit: str
    v_before: str
    v_after: str
    actions: tuple[RefactoringAction, ...]
    annotation: QualityAnnotation
    # parsed forms and quality components, derived once at construction
    before_ast: DockerfileAst = field(init=False, compare=False, repr=False)
    after_ast: DockerfileAst = field(init=False, compare=False, repr=False)
    size_score: float = field(init=False, compare=False, repr=False)
    duration_score: float = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        before = parse(self.v_before)
        after = parse(self.v_after)
        if functional_fingerprint(before) != functional_fingerprint(after):
            raise IngestRejection("behavior-change", "application files or startup commands differ")
        object.__setattr__(self, "before_ast", before)
        object.__setattr__(self, "after_ast", after)
        object.__setattr__(self, "size_score", self.annotation.image_size_score)
        object.__setattr__(self, "duration_score", self.annotation.build_duration_score)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "project": self.project,
            "commit": self.commit,
            "v_before": self.v_before,
            "v_after": self.v_after,
            "actions": [a.to_json() for a in self.actions],
            "annotation": self.annotation.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Demonstration":
        return cls(
            id=str(data["id"]),
            project=str(data["project"]),
            commit=str(data["commit"]),
            v_before=data["v_before"],
            v_after=data["v_after"],
            actions=tuple(RefactoringAction.from_json(a) for a in data.get("actions", ())),
            annotation=QualityAnnotation(**data["annotation"]),
        )


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    avg_doc_len: float
    doc_freq: dict[str, int] = field(hash=False)

    @classmethod
    def from_documents(cls, docs: list[list[str]]) -> "CorpusStats":
        df: Counter = Counter()
        for tokens in docs:
            df.update(set(tokens))
        n = len(docs)
        avg = sum(len(d) for d in docs) / n if n else 0.0
        return cls(n, avg, dict(df))


@dataclass(frozen=True)
class Corpus:
    demos: tuple[Demonstration, ...]
    stats: CorpusStats
    doc_tokens: dict[str, list[str]] = field(hash=False, repr=False)
    rejected: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.demos)

    @classmethod
    def from_demonstrations(cls, demos, rejected=()) -> "Corpus":
        demos = tuple(demos)
        ids = Counter(d.id for d in demos)
        dupes = [i for i, c in ids.items() if c > 1]
        if dupes:
            raise CorpusError(f"duplicate demonstration ids: {', '.join(sorted(dupes))}")
        tokens = {d.id: tokenize(d.v_before) for d in demos}
        stats = CorpusStats.from_documents([tokens[d.id] for d in demos])
        return cls(demos, stats, tokens, tuple(rejected))


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a JSON Lines demonstration corpus.

    Invalid records are skipped and described in ``Corpus.rejected``.
    """
    path = Path(path)
    demos: list[Demonstration] = []
    rejected: list[str] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                demo = Demonstration.from_json(json.loads(line))
            except DockerfileSyntaxError as exc:
                rejected.append(f"{path}:{lineno}: Dockerfile does not parse ({exc})")
                continue
            except IngestRejection as exc:
                rejected.append(f"{path}:{lineno}: {exc}")
                continue
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                rejected.append(f"{path}:{lineno}: invalid record ({exc})")
                continue
            if demo.id in seen:
                rejected.append(f"{path}:{lineno}: duplicate id {demo.id!r}")
                continue
            seen.add(demo.id)
            demos.append(demo)
    for message in rejected:
        log.warning("rejected corpus record %s", message)
    if not demos:
        raise CorpusError(f"{path} contains no valid demonstrations")
    return Corpus.from_demonstrations(demos, rejected)


def demonstration_id(project: str, commit: str, v_before: str, v_after: str) -> str:
    h = hashlib.sha256("\0".join((project, commit, v_before, v_after)).encode("utf-8"))
    return h.hexdigest()[:16]


def ingest_pair(
    v_before: str,
    v_after: str,
    metadata: dict,
    before_build: BuildResult,
    after_build: BuildResult,
) -> Demonstration:
    """Build a Demonstration from a measured pair, or raise IngestRejection.

    ``metadata`` carries ``project``, ``commit``, ``understandability`` and
    ``maintainability``; ``id`` and ``actions`` are derived when absent.
    """
    if not before_build.success:
        raise IngestRejection("build-before", f"original failed to build ({before_build.failure.value})")
    if not after_build.success:
        raise IngestRejection("build-after", f"refactored version failed to build ({after_build.failure.value})")
    try:
        before, after = parse(v_before), parse(v_after)
    except DockerfileSyntaxError as exc:
        raise IngestRejection("parse", str(exc)) from None
    if functional_fingerprint(before) != functional_fingerprint(after):
        raise IngestRejection("behavior-change", "application files or startup commands differ")
    project, commit = str(metadata["project"]), str(metadata["commit"])
    actions = metadata.get("actions")
    if actions is None:
        actions = detect_refactorings(before, after)
    annotation = QualityAnnotation(
        understandability=metadata["understandability"],
        maintainability=metadata["maintainability"],
        image_size_before_mb=before_build.image_size_mb,
        image_size_after_mb=after_build.image_size_mb,
        build_duration_before_s=before_build.build_duration_s,
        build_duration_after_s=after_build.build_duration_s,
    )
    return Demonstration(
        id=metadata.get("id") or demonstration_id(project, commit, v_before, v_after),
        project=project,
        commit=commit,
        v_before=v_before,
        v_after=v_after,
        actions=tuple(actions),
        annotation=annotation,
    )


_APPEND_LOCK = threading.Lock()


def append_demonstration(path: str | Path, demo: Demonstration) -> None:
    line = json.dumps(demo.to_json(), sort_keys=True, ensure_ascii=False)
    with _APPEND_LOCK, Path(path).open("a", encoding="utf-8") as fh:
        fh.write(line + "\n")


def write_corpus(path: str | Path, demos) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for demo in demos:
            fh.write(json.dumps(demo.to_json(), sort_keys=True, ensure_ascii=False) + "\n")


def stratified_project_split(demos, test_fraction: float = 0.25, seed: int = 0):
    """Split into (train, test) with no project on both sides.

    Projects are assigned whole, in a seeded order, to whichever side keeps
    each demonstration's primary refactoring type closest to the target mix.
    """
    by_project: dict[str, list[Demonstration]] = defaultdict(list)
    for demo in demos:
        by_project[demo.project].append(demo)
    projects = sorted(by_project)
    random.Random(seed).shuffle(projects)
    projects.sort(key=lambda p: -len(by_project[p]))

    def stratum(demo: Demonstration) -> str:
        return demo.actions[0].type if demo.actions else "none"

    totals = Counter(stratum(d) for d in demos)
    in_test: Counter = Counter()
    train, test = [], []
    for project in projects:
        group = by_project[project]
        need = sum(totals[stratum(d)] * test_fraction - in_test[stratum(d)] for d in group)
        if need >= len(group) / 2:
            test.extend(group)
            in_test.update(stratum(d) for d in group)
        else:
            train.extend(group)
    return train, test
