"""Build Dockerfiles on a local container engine and measure the result.

Two engine backends share one small interface: :class:`ApiEngine` talks to
the engine HTTP API (unix socket or TCP), :class:`CliEngine` shells out to
the ``docker`` command line. Builds against one endpoint are serialized so
duration measurements do not interfere with each other.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import os
import re
import shutil
import statistics
import subprocess
import tarfile
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .dockerfile import DockerfileAst, DockerfileSyntaxError, ImageRef, functional_fingerprint, parse

log = logging.getLogger(__name__)

DEFAULT_ENDPOINT = "unix:///var/run/docker.sock"
MEGABYTE = 1_000_000  # decimal MB, matching reported image sizes


class FailureCategory(str, enum.Enum):
    BUILD_CONTEXT = "BuildContext"
    DEPENDENCY = "Dependency"
    SYNTAX = "Syntax"
    MISSING_BASE_IMAGE = "MissingBaseImage"
    OTHER = "Other"


class EngineUnavailable(RuntimeError):
    pass


class ContextError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class MeasurementConfig:
    runs: int = 3
    no_cache: bool = True
    network: bool = True
    timeout_s: float = 1800.0
    engine_endpoint: str = field(default_factory=lambda: os.environ.get("DOCKER_HOST", DEFAULT_ENDPOINT))
    include_pull_time: bool = False

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class BuildResult:
    success: bool
    image_size_mb: float | None = None
    build_duration_s: float | None = None
    per_run_durations_s: tuple[float, ...] = ()
    log: str = ""
    failure: FailureCategory | None = None

    def __post_init__(self):
        if self.success:
            if self.image_size_mb is None or self.build_duration_s is None or self.failure is not None:
                raise ValueError("a successful build needs size and duration and no failure")
        elif self.failure is None:
            raise ValueError("a failed build needs a failure category")

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "image_size_mb": self.image_size_mb,
            "build_duration_s": self.build_duration_s,
            "per_run_durations_s": list(self.per_run_durations_s),
            "failure": self.failure.value if self.failure else None,
            "log": self.log,
        }

    @classmethod
    def from_json(cls, data: dict) -> "BuildResult":
        failure = data.get("failure")
        return cls(
            success=bool(data["success"]),
            image_size_mb=data.get("image_size_mb"),
            build_duration_s=data.get("build_duration_s"),
            per_run_durations_s=tuple(data.get("per_run_durations_s", ())),
            log=data.get("log", ""),
            failure=FailureCategory(failure) if failure else None,
        )


# ---------------------------------------------------------------------------
# failure classification


@dataclass(frozen=True)
class FailureRules:
    rules: tuple[tuple[FailureCategory, tuple[re.Pattern, ...]], ...]

    def classify(self, log_text: str) -> FailureCategory:
        for category, patterns in self.rules:
            if any(p.search(log_text) for p in patterns):
                return category
        return FailureCategory.OTHER


def load_failure_rules(path: str | Path | None = None) -> FailureRules:
    if path is None:
        text = resources.files("dockrefactor").joinpath("data/failure_patterns.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    doc = json.loads(text)
    rules = []
    for rule in doc["rules"]:
        patterns = tuple(re.compile(p, re.IGNORECASE) for p in rule["patterns"])
        rules.append((FailureCategory(rule["category"]), patterns))
    return FailureRules(tuple(rules))


_DEFAULT_RULES: FailureRules | None = None


def classify_failure(log_text: str, rules: FailureRules | None = None) -> FailureCategory:
    """Map a failed build log to exactly one failure category."""
    global _DEFAULT_RULES
    if rules is None:
        if _DEFAULT_RULES is None:
            _DEFAULT_RULES = load_failure_rules()
        rules = _DEFAULT_RULES
    return rules.classify(log_text)


def behavior_preserved(before: DockerfileAst, after: DockerfileAst) -> bool:
    return functional_fingerprint(before) == functional_fingerprint(after)


# ---------------------------------------------------------------------------
# engines


class Engine(Protocol):
    endpoint: str

    def ping(self) -> None: ...

    def pull(self, image: str) -> None: ...

    def build(self, dockerfile_text: str, context_dir: Path, tag: str, *,
              no_cache: bool, network: bool, timeout_s: float) -> tuple[bool, str]: ...

    def image_size(self, tag: str) -> int: ...

    def remove(self, tag: str) -> None: ...


_DOCKERFILE_NAME = ".dockrefactor.Dockerfile"


def context_tar(context_dir: Path, dockerfile_text: str) -> bytes:
    """Tar the build context with the Dockerfile added under a private name."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        for path in sorted(context_dir.rglob("*")):
            tar.add(path, arcname=str(path.relative_to(context_dir)), recursive=False)
        data = dockerfile_text.encode("utf-8")
        info = tarfile.TarInfo(_DOCKERFILE_NAME)
        info.size = len(data)
        info.mode = 0o644
        tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


class ApiEngine:
    """Client for the container engine HTTP API."""

    def __init__(self, endpoint: str = DEFAULT_ENDPOINT, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        if endpoint.startswith("unix://"):
            if transport is None:
                transport = httpx.HTTPTransport(uds=endpoint[len("unix://"):])
            base_url = "http://engine"
        else:
            base_url = endpoint.replace("tcp://", "http://", 1)
        self._client = httpx.Client(transport=transport, base_url=base_url, timeout=None)

    def _request(self, method: str, url: str, **kwargs) -> httpx.Response:
        try:
            return self._client.request(method, url, **kwargs)
        except (httpx.ConnectError, httpx.ConnectTimeout, FileNotFoundError, ConnectionRefusedError) as exc:
            raise EngineUnavailable(f"container engine at {self.endpoint} is unreachable: {exc}") from exc

    def ping(self) -> None:
        resp = self._request("GET", "/_ping", timeout=10)
        if resp.status_code != 200:
            raise EngineUnavailable(f"engine ping failed with status {resp.status_code}")

    def pull(self, image: str) -> None:
        ref = ImageRef.parse(image)
        if ref.digest is not None:
            params = {"fromImage": f"{ref.repository}@{ref.digest}"}
        else:
            params = {"fromImage": ref.repository, "tag": ref.tag or "latest"}
        resp = self._request("POST", "/images/create", params=params)
        for event in _events(resp.text):
            if "error" in event:
                log.warning("pull of %s failed: %s", image, event["error"])

    def build(self, dockerfile_text, context_dir, tag, *, no_cache, network, timeout_s):
        params = {
            "t": tag,
            "dockerfile": _DOCKERFILE_NAME,
            "nocache": "1" if no_cache else "0",
            "rm": "1",
            "forcerm": "1",
            "networkmode": "default" if network else "none",
        }
        body = context_tar(Path(context_dir), dockerfile_text)
        resp = self._request("POST", "/build", params=params, content=body,
                             headers={"Content-Type": "application/x-tar"}, timeout=timeout_s)
        if resp.status_code >= 400:
            try:
                message = resp.json().get("message", resp.text)
            except ValueError:
                message = resp.text
            return False, message
        lines, ok = [], True
        for event in _events(resp.text):
            if "stream" in event:
                lines.append(event["stream"])
            if "error" in event:
                ok = False
                lines.append(event["error"] + "\n")
        return ok, "".join(lines)

    def image_size(self, tag: str) -> int:
        resp = self._request("GET", f"/images/{tag}/json")
        resp.raise_for_status()
        return int(resp.json()["Size"])

    def remove(self, tag: str) -> None:
        self._request("DELETE", f"/images/{tag}", params={"force": "1"})


def _events(text: str):
    decoder = json.JSONDecoder()
    pos = 0
    while pos < len(text):
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        try:
            obj, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            break
        if isinstance(obj, dict):
            yield obj


class CliEngine:
    """Fallback engine driving the ``docker`` command line tool."""

    def __init__(self, executable: str = "docker", endpoint: str | None = None):
        self.executable = executable
        self.endpoint = endpoint or f"cli:{executable}"

    def _run(self, args, **kwargs) -> subprocess.CompletedProcess:
        try:
            return subprocess.run([self.executable, *args], capture_output=True, text=True, **kwargs)
        except FileNotFoundError as exc:
            raise EngineUnavailable(f"{self.executable} not found") from exc

    def ping(self) -> None:
        proc = self._run(["version", "--format", "{{.Server.Version}}"], timeout=30)
        if proc.returncode != 0:
            raise EngineUnavailable(proc.stderr.strip() or "engine not reachable")

    def pull(self, image: str) -> None:
        self._run(["pull", image])

    def build(self, dockerfile_text, context_dir, tag, *, no_cache, network, timeout_s):
        args = ["build", "-t", tag, "-f", "-", "--network", "default" if network else "none"]
        if no_cache:
            args.append("--no-cache")
        args.append(str(context_dir))
        try:
            proc = self._run(args, input=dockerfile_text, timeout=timeout_s)
        except subprocess.TimeoutExpired as exc:
            return False, f"build timed out after {timeout_s}s\n{exc.stdout or ''}"
        return proc.returncode == 0, proc.stdout + proc.stderr

    def image_size(self, tag: str) -> int:
        proc = self._run(["image", "inspect", "--format", "{{.Size}}", tag])
        return int(proc.stdout.strip())

    def remove(self, tag: str) -> None:
        self._run(["rmi", "-f", tag])


def connect(endpoint: str) -> Engine:
    """Return a reachable engine for ``endpoint``, falling back to the CLI."""
    api = ApiEngine(endpoint)
    try:
        api.ping()
        return api
    except EngineUnavailable as api_error:
        if shutil.which("docker") is None:
            raise
        cli = CliEngine()
        try:
            cli.ping()
        except EngineUnavailable:
            raise api_error from None
        return cli


# one in-flight build per engine endpoint
_ENDPOINT_LOCKS: dict[str, threading.Lock] = {}
_LOCKS_GUARD = threading.Lock()


def _endpoint_lock(endpoint: str) -> threading.Lock:
    with _LOCKS_GUARD:
        return _ENDPOINT_LOCKS.setdefault(endpoint, threading.Lock())


def _base_images(dockerfile_text: str) -> list[str]:
    try:
        ast = parse(dockerfile_text)
    except DockerfileSyntaxError:
        return []
    images = []
    for stage in ast.stages:
        ref = stage.base
        if ref.stage_alias is None and "$" not in str(ref) and ref.name != "scratch":
            images.append(str(ref))
    return images


def build_and_measure(
    dockerfile_text: str,
    context_dir: str | Path,
    config: MeasurementConfig = MeasurementConfig(),
    *,
    engine: Engine | None = None,
    clock: Callable[[], float] = time.perf_counter,
    log_dir: str | Path | None = None,
) -> BuildResult:
    """Build ``config.runs`` times without cache and report size and mean duration.

    Stops at the first failed run and classifies its log.
    """
    context_dir = Path(context_dir)
    if not context_dir.is_dir():
        raise ContextError(f"build context {context_dir} does not exist")
    if engine is None:
        engine = connect(config.engine_endpoint)
    else:
        engine.ping()

    digest = hashlib.sha256(dockerfile_text.encode("utf-8")).hexdigest()[:12]
    durations: list[float] = []
    size_bytes = None
    with _endpoint_lock(engine.endpoint):
        if not config.include_pull_time:
            for image in _base_images(dockerfile_text):
                engine.pull(image)
        for run in range(config.runs):
            tag = f"dockrefactor-measure:{digest}-{run}"
            start = clock()
            ok, build_log = engine.build(dockerfile_text, context_dir, tag, no_cache=config.no_cache,
                                         network=config.network, timeout_s=config.timeout_s)
            elapsed = clock() - start
            if log_dir is not None:
                out = Path(log_dir)
                out.mkdir(parents=True, exist_ok=True)
                (out / f"build-{digest}-run{run + 1}.log").write_text(build_log, encoding="utf-8")
            if not ok:
                engine.remove(tag)
                return BuildResult(False, per_run_durations_s=tuple(durations), log=build_log,
                                   failure=classify_failure(build_log))
            durations.append(elapsed)
            size_bytes = engine.image_size(tag)
            engine.remove(tag)
    return BuildResult(
        True,
        image_size_mb=size_bytes / MEGABYTE,
        build_duration_s=statistics.fmean(durations),
        per_run_durations_s=tuple(durations),
        log=build_log,
    )


def syntax_failure(error: DockerfileSyntaxError) -> BuildResult:
    """Failed result for a Dockerfile rejected by the local parser, without building."""
    text = f"dockerfile parse error line {error.line}: {error.message}\n"
    return BuildResult(False, log=text, failure=classify_failure(text))
