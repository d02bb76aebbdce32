"""Command-line interface.

Exit codes: 0 success, 1 operational error, 2 build failure,
3 behaviour change.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import subprocess
import sys
import tarfile
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import tomli

from .build import (
    BuildResult,
    ContextError,
    Engine,
    EngineUnavailable,
    MeasurementConfig,
    build_and_measure,
    connect,
    syntax_failure,
)
from .corpus import Corpus, CorpusError, IngestRejection, append_demonstration, ingest_pair, is_sar_candidate, load_corpus
from .dockerfile import DockerfileSyntaxError, estimate_tokens, functional_fingerprint, parse
from .evaluation import (
    CommitMeasurement,
    EmptyInput,
    EvaluationRecord,
    TooFewCommits,
    Variant,
    aggregate,
    lifecycle_profile,
    segment_lifecycle,
)
from .llm import (
    Backend,
    BackendConfig,
    BackendError,
    CompletionClient,
    ExtractionError,
    ReplayMiss,
    ReplayStore,
    TransportError,
    candidate_dockerfile,
)
from .prompting import BudgetError, TemplateError, assemble, load_template, max_shots, render_demo, render_query
from .quality import build_duration_score, image_size_score
from .refactorings import UNCLASSIFIED, TaxonomyError, detect_refactorings, load_taxonomy
from .retrieval import SelectionError, select_demonstrations

log = logging.getLogger("dockrefactor")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUILD_FAILURE = 2
EXIT_BEHAVIOR_CHANGE = 3

DEFAULT_WINDOW = 128_000
DEFAULT_OUTPUT = "dockrefactor-out"
_SECRET_KEYS = {"api_key", "apikey", "token", "secret", "password", "key"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    corpus_path: Optional[Path] = None
    template_path: Optional[Path] = None
    taxonomy_path: Optional[Path] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    backend_kind: str = "http"
    replay_path: Optional[Path] = None
    record_path: Optional[Path] = None
    shots: int = 0
    context_window: int = DEFAULT_WINDOW
    measurement: MeasurementConfig = field(default_factory=MeasurementConfig)
    output_dir: Path = Path(DEFAULT_OUTPUT)

    def __post_init__(self):
        if self.shots < 0:
            raise ConfigError("shots must be non-negative")
        if self.context_window <= 0:
            raise ConfigError("context_window must be positive")
        if self.backend_kind not in ("http", "replay"):
            raise ConfigError(f"unknown backend {self.backend_kind!r}")
        if self.backend_kind == "replay" and self.replay_path is None:
            raise ConfigError("the replay backend needs --replay PATH")


def _path(value) -> Optional[Path]:
    return None if value in (None, "") else Path(value)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the TOML config file (if any) with command-line flags; flags win."""
    data: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "rb") as fh:
                data = tomli.load(fh)
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    backend_table = dict(data.get("backend", {}))
    leaked = _SECRET_KEYS & {k.lower() for k in backend_table}
    if leaked:
        raise ConfigError(
            f"config must not hold credentials ({', '.join(sorted(leaked))}); "
            "set backend.auth to the name of an environment variable instead")
    kind = backend_table.pop("kind", "http")
    try:
        backend = BackendConfig(**backend_table)
        measurement = MeasurementConfig(**data.get("measurement", {}))
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from None

    def pick(flag: str, key: str, default=None):
        value = getattr(args, flag, None)
        return value if value is not None else data.get(key, default)

    replay = pick("replay", "replay")
    kind = getattr(args, "backend", None) or ("replay" if getattr(args, "replay", None) else kind)
    return RunConfig(
        corpus_path=_path(pick("corpus", "corpus")),
        template_path=_path(data.get("template")),
        taxonomy_path=_path(data.get("taxonomy")),
        backend=backend,
        backend_kind=kind,
        replay_path=_path(replay),
        record_path=_path(pick("record", "record")),
        shots=int(pick("shots", "shots", 0)),
        context_window=int(data.get("context_window", DEFAULT_WINDOW)),
        measurement=measurement,
        output_dir=Path(pick("output", "output", DEFAULT_OUTPUT)),
    )


# ---------------------------------------------------------------------------
# helpers


@dataclass
class Services:
    """Injectable collaborators; tests swap in fakes."""

    engine: Optional[Engine] = None
    backend: Optional[Backend] = None
    clock: Callable[[], float] = time.perf_counter
    sleep: Callable[[float], None] = time.sleep

    def get_engine(self, config: MeasurementConfig) -> Engine:
        if self.engine is None:
            self.engine = connect(config.engine_endpoint)
        return self.engine

    def measure(self, text: str, context: Path, config: RunConfig, log_dir: Optional[Path] = None) -> BuildResult:
        try:
            parse(text)
        except DockerfileSyntaxError as exc:
            return syntax_failure(exc)
        return build_and_measure(text, context, config.measurement, engine=self.get_engine(config.measurement),
                                 clock=self.clock, log_dir=log_dir)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_corpus(config: RunConfig) -> Corpus:
    if config.corpus_path is None:
        raise ConfigError("a corpus is required (--corpus)")
    return load_corpus(config.corpus_path)


def _client(config: RunConfig, services: Services) -> CompletionClient:
    replay = ReplayStore(config.replay_path) if config.backend_kind == "replay" else None
    record = ReplayStore(config.record_path) if config.record_path else None
    return CompletionClient(config.backend, services.backend, replay=replay, record=record, sleep=services.sleep)


# ---------------------------------------------------------------------------
# commands


def cmd_refactor(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    source = Path(args.dockerfile)
    context = Path(args.context) if args.context else source.parent
    original = source.read_text(encoding="utf-8")
    before_ast = parse(original)
    if not context.is_dir():
        raise ContextError(f"build context {context} does not exist")
    out = config.output_dir

    taxonomy = load_taxonomy(config.taxonomy_path)
    template = load_template(config.template_path, taxonomy)
    selected = []
    if config.shots > 0:
        corpus = _load_corpus(config)
        per_demo = sum(estimate_tokens(render_demo(template, d)) for d in corpus.demos) // len(corpus)
        template_tokens = template.header_tokens + estimate_tokens(template.system)
        limit = max_shots(config.context_window, template_tokens, per_demo,
                          estimate_tokens(render_query(template, original)))
        if config.shots > limit:
            raise BudgetError(f"{config.shots} shots exceed the budget of {limit} for a "
                              f"{config.context_window}-token window")
        selected = select_demonstrations(corpus, before_ast, config.shots)
    _write(out / "score_breakdowns.json", _dump([
        {"id": demo.id, "project": demo.project, "score": breakdown.to_json()} for demo, breakdown in selected
    ]))
    prompt = assemble(template, selected, original, config.context_window)
    _write(out / "prompt.txt", prompt.text)

    response = _client(config, services).complete(prompt)
    candidate = candidate_dockerfile(response)
    if candidate is None:
        raise ExtractionError("the model response contains no Dockerfile")
    _write(out / "refactored.Dockerfile", candidate)

    before = services.measure(original, context, config)
    _write(out / "build_before.json", _dump(before.to_json()))
    after = services.measure(candidate, context, config)
    _write(out / "build_after.json", _dump(after.to_json()))

    report = {
        "id": source.name,
        "variant": Variant.AUTOMATED.value,
        "shots": prompt.shots,
        "demo_ids": list(prompt.demo_ids),
        "prompt_tokens": prompt.token_estimate,
        "understandability_delta": None,
        "maintainability_delta": None,
        "actions": [],
        "quality": None,
        "failure": None,
    }
    try:
        after_ast = parse(candidate)
    except DockerfileSyntaxError:
        after_ast = None
    preserved = after_ast is not None and functional_fingerprint(before_ast) == functional_fingerprint(after_ast)
    report["behavior_preserved"] = preserved
    if after_ast is not None:
        report["actions"] = [a.to_json() for a in detect_refactorings(before_ast, after_ast, taxonomy)]

    if after_ast is not None and not preserved:
        status, code = "behavior-change", EXIT_BEHAVIOR_CHANGE
    elif not before.success or not after.success:
        failed = before if not before.success else after
        status, code = "build-failure", EXIT_BUILD_FAILURE
        report["failure"] = {"build": "before" if failed is before else "after", "category": failed.failure.value}
    else:
        status, code = "ok", EXIT_OK
        report["quality"] = {
            "image_size_score": image_size_score(before.image_size_mb, after.image_size_mb),
            "build_duration_score": build_duration_score(before.build_duration_s, after.build_duration_s),
        }
    report["status"] = status
    report["exit_code"] = code
    _write(out / "report.json", _dump(report))
    if code == EXIT_BUILD_FAILURE:
        print(f"build failed ({report['failure']['build']}): {report['failure']['category']}", file=sys.stderr)
    elif code == EXIT_BEHAVIOR_CHANGE:
        print("refactored Dockerfile changes application files or startup commands", file=sys.stderr)
    print(_dump({"status": status, "output": str(out)}), end="")
    return code


def cmd_detect(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    taxonomy = load_taxonomy(config.taxonomy_path)
    before = parse(Path(args.before).read_text(encoding="utf-8"))
    after = parse(Path(args.after).read_text(encoding="utf-8"))
    text = _dump({"actions": [a.to_json() for a in detect_refactorings(before, after, taxonomy)]})
    if getattr(args, "output", None):
        _write(config.output_dir / "actions.json", text)
    print(text, end="")
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    corpus = _load_corpus(config)
    query = parse(Path(args.dockerfile).read_text(encoding="utf-8"))
    selected = select_demonstrations(corpus, query, args.n)
    ranked = [
        {"rank": rank, "id": demo.id, "project": demo.project, "commit": demo.commit, "score": breakdown.to_json()}
        for rank, (demo, breakdown) in enumerate(reversed(selected), 1)
    ]
    text = _dump({"demonstrations": ranked})
    if getattr(args, "output", None):
        _write(config.output_dir / "retrieval.json", text)
    print(text, end="")
    return EXIT_OK


def records_from_report(data: dict) -> tuple[EvaluationRecord, EvaluationRecord]:
    """The (before, after) record pair described by a refactor ``report.json`` and its build files."""
    before = EvaluationRecord(data["id"], Variant.ORIGINAL, data["build_before"])
    after = EvaluationRecord(
        data["id"],
        Variant(data.get("variant", Variant.AUTOMATED.value)),
        data["build_after"],
        understandability_delta=data.get("understandability_delta"),
        maintainability_delta=data.get("maintainability_delta"),
        behavior_ok=bool(data.get("behavior_preserved", True)),
    )
    return before, after


def load_records(records_dir: Path) -> list[tuple[EvaluationRecord, EvaluationRecord]]:
    pairs = []
    for report_path in sorted(records_dir.rglob("report.json")):
        folder = report_path.parent
        data = json.loads(report_path.read_text(encoding="utf-8"))
        data["build_before"] = BuildResult.from_json(json.loads((folder / "build_before.json").read_text("utf-8")))
        data["build_after"] = BuildResult.from_json(json.loads((folder / "build_after.json").read_text("utf-8")))
        data["id"] = str(folder.relative_to(records_dir))
        pairs.append(records_from_report(data))
    return pairs


def cmd_evaluate(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    records_dir = Path(args.records_dir)
    if not records_dir.is_dir():
        raise FileNotFoundError(f"records directory {records_dir} does not exist")
    report = aggregate(load_records(records_dir))
    table = report.to_markdown()
    if getattr(args, "output", None):
        _write(config.output_dir / "evaluation.json", _dump(report.to_json()))
        _write(config.output_dir / "evaluation.md", table)
    print(table, end="")
    return EXIT_OK


def _git(repo: Path, *argv: str, binary: bool = False):
    proc = subprocess.run(["git", "-C", str(repo), *argv], capture_output=True, check=False)
    if proc.returncode != 0:
        raise RuntimeError(f"git {' '.join(argv)} failed: {proc.stderr.decode(errors='replace').strip()}")
    return proc.stdout if binary else proc.stdout.decode("utf-8", errors="replace")


def dockerfile_commits(repo: Path, rel_path: str) -> list[tuple[str, str]]:
    """(sha, subject) of every commit touching ``rel_path``, oldest first."""
    out = _git(repo, "log", "--reverse", "--format=%H%x00%s", "--", rel_path)
    return [tuple(line.split("\0", 1)) for line in out.splitlines() if line]


def _export_tree(repo: Path, sha: str, dest: Path) -> None:
    """Extract the tree at ``sha`` into ``dest`` without touching the working tree."""
    archive = _git(repo, "archive", "--format=tar", sha, binary=True)
    with tarfile.open(fileobj=io.BytesIO(archive)) as tar:
        tar.extractall(dest)


def cmd_evolve(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    repo = Path(args.repo)
    commits = dockerfile_commits(repo, args.dockerfile)
    segment_lifecycle(len(commits))  # rejects short histories before any build
    history: list[CommitMeasurement] = []
    previous = None
    for sha, subject in commits:
        with tempfile.TemporaryDirectory(prefix="dockrefactor-evolve-") as tmp:
            _export_tree(repo, sha, Path(tmp))
            path = Path(tmp) / args.dockerfile
            text = path.read_text(encoding="utf-8") if path.exists() else ""
            result = services.measure(text, path.parent if path.exists() else Path(tmp), config)
        refactoring = False
        try:
            current = parse(text)
        except DockerfileSyntaxError:
            current = None
        if current is not None and previous is not None:
            actions = detect_refactorings(previous, current)
            refactoring = any(a.type != UNCLASSIFIED for a in actions) or (
                bool(actions) and is_sar_candidate(subject))
        if current is not None:
            previous = current
        history.append(CommitMeasurement(
            result.image_size_mb if result.success else None,
            result.build_duration_s if result.success else None,
            refactoring,
        ))
        log.info("commit %s: %s", sha[:10], "built" if result.success else result.failure.value)
    csv_text = lifecycle_profile(history).to_csv()
    if getattr(args, "output", None):
        _write(config.output_dir / "lifecycle.csv", csv_text)
    print(csv_text, end="")
    return EXIT_OK


_REJECTION_EXIT = {"build-before": EXIT_BUILD_FAILURE, "build-after": EXIT_BUILD_FAILURE,
                   "behavior-change": EXIT_BEHAVIOR_CHANGE, "parse": EXIT_ERROR}


def cmd_ingest(args: argparse.Namespace, config: RunConfig, services: Services) -> int:
    if config.corpus_path is None:
        raise ConfigError("ingest needs --corpus to append to")
    v_before = Path(args.before).read_text(encoding="utf-8")
    v_after = Path(args.after).read_text(encoding="utf-8")
    context = Path(args.context)
    if not context.is_dir():
        raise ContextError(f"build context {context} does not exist")
    metadata = {"project": args.project, "commit": args.commit,
                "understandability": args.understandability, "maintainability": args.maintainability}
    try:
        demo = ingest_pair(v_before, v_after, metadata, services.measure(v_before, context, config),
                           services.measure(v_after, context, config))
    except IngestRejection as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return _REJECTION_EXIT[exc.reason]
    append_demonstration(config.corpus_path, demo)
    print(_dump({"id": demo.id, "actions": [a.to_json() for a in demo.actions]}), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    common.add_argument("--config", default=s, help="TOML config file; flags override its values")
    common.add_argument("--corpus", default=s, help="demonstration corpus (JSON Lines)")
    common.add_argument("--shots", type=int, default=s, help="number of demonstrations in the prompt")
    common.add_argument("--backend", choices=("http", "replay"), default=s, help="completion backend")
    common.add_argument("--replay", default=s, help="answer prompts from this recorded exchange file")
    common.add_argument("--record", default=s, help="append live exchanges to this file")
    common.add_argument("--output", default=s, help="directory for artifacts")
    common.add_argument("-v", "--verbose", action="store_true", default=s)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="dockrefactor", parents=[common],
                                     description="Retrieval-augmented Dockerfile refactoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refactor", parents=[common], help="refactor one Dockerfile and measure the result")
    p.add_argument("dockerfile")
    p.add_argument("--context", help="build context directory (default: the Dockerfile's directory)")
    p.set_defaults(func=cmd_refactor)

    p = sub.add_parser("detect", parents=[common], help="list refactorings between two Dockerfiles")
    p.add_argument("before")
    p.add_argument("after")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("retrieve", parents=[common], help="rank corpus demonstrations for a Dockerfile")
    p.add_argument("dockerfile")
    p.add_argument("-n", type=int, default=5, help="number of demonstrations (default 5)")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("evaluate", parents=[common], help="aggregate refactor reports into a results table")
    p.add_argument("records_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("evolve", parents=[common], help="lifecycle profile of a Dockerfile's git history")
    p.add_argument("repo")
    p.add_argument("dockerfile", help="Dockerfile path relative to the repository root")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("ingest", parents=[common], help="measure a before/after pair and add it to the corpus")
    p.add_argument("before")
    p.add_argument("after")
    p.add_argument("--context", required=True)
    p.add_argument("--project", required=True)
    p.add_argument("--commit", required=True)
    p.add_argument("--understandability", type=int, choices=(-1, 0, 1), required=True)
    p.add_argument("--maintainability", type=int, choices=(-1, 0, 1), required=True)
    p.set_defaults(func=cmd_ingest)
    return parser


_OPERATIONAL_ERRORS = (
    OSError, ConfigError, CorpusError, DockerfileSyntaxError, TaxonomyError, TemplateError, BudgetError,
    SelectionError, ExtractionError, ReplayMiss, TransportError, BackendError, EngineUnavailable,
    EmptyInput, TooFewCommits, RuntimeError, ValueError,
)


def main(argv: Optional[list[str]] = None, *, services: Optional[Services] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    services = services or Services()
    try:
        config = load_run_config(args)
        if args.command == "refactor":
            config.output_dir.mkdir(parents=True, exist_ok=True)
        return args.func(args, config, services)
    except _OPERATIONAL_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def run() -> None:
    sys.exit(main())
