import io
import json
import re
import tarfile
from pathlib import Path

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES, FakeClock, FakeEngine
from dockrefactor.build import (
    ApiEngine,
    BuildResult,
    ContextError,
    EngineUnavailable,
    FailureCategory,
    MeasurementConfig,
    behavior_preserved,
    build_and_measure,
    classify_failure,
    context_tar,
    syntax_failure,
)
from dockrefactor.dockerfile import DockerfileSyntaxError, parse

LOGS = sorted((FIXTURES / "logs").glob("*.log"))
_PREFIX = {"syntax": FailureCategory.SYNTAX, "missing-base": FailureCategory.MISSING_BASE_IMAGE,
           "context": FailureCategory.BUILD_CONTEXT, "dependency": FailureCategory.DEPENDENCY,
           "other": FailureCategory.OTHER}


def expected_category(path: Path) -> FailureCategory:
    return _PREFIX[re.match(r"(.*?)-\d\d-", path.name).group(1)]


# ---------------------------------------------------------------------------
# classification


@pytest.mark.parametrize("path", LOGS, ids=[p.stem for p in LOGS])
def test_log_fixtures_classify(path):
    assert classify_failure(path.read_text()) is expected_category(path)


def test_log_fixtures_cover_each_category_three_times():
    counts = {}
    for path in LOGS:
        counts[expected_category(path)] = counts.get(expected_category(path), 0) + 1
    for category in (FailureCategory.SYNTAX, FailureCategory.MISSING_BASE_IMAGE,
                     FailureCategory.BUILD_CONTEXT, FailureCategory.DEPENDENCY):
        assert counts[category] >= 3


@pytest.mark.parametrize("text, category", [
    ("COPY failed: forbidden path outside the build context: ../install.sh", FailureCategory.BUILD_CONTEXT),
    ("E: Unable to locate package python-pip", FailureCategory.DEPENDENCY),
    ("dockerfile parse error on line 3: unknown instruction: apt-get", FailureCategory.SYNTAX),
    ("pull access denied for foo, repository does not exist", FailureCategory.MISSING_BASE_IMAGE),
    ("segmentation fault", FailureCategory.OTHER),
])
def test_spec_examples(text, category):
    assert classify_failure(text) is category


def test_rule_order_puts_syntax_first():
    log = "unknown instruction: RRUN\nE: Unable to locate package x\n"
    assert classify_failure(log) is FailureCategory.SYNTAX


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.one_of(
    st.text(max_size=40),
    st.sampled_from([p.read_text() for p in LOGS]),
), max_size=4))
def test_classification_total_and_deterministic(parts):
    log = "\n".join(parts)
    first = classify_failure(log)
    assert isinstance(first, FailureCategory)
    assert classify_failure(log) is first


def test_syntax_failure_from_local_parser():
    with pytest.raises(DockerfileSyntaxError) as info:
        parse("FROM alpine\nRRUN x\n")
    result = syntax_failure(info.value)
    assert not result.success and result.failure is FailureCategory.SYNTAX


# ---------------------------------------------------------------------------
# results and behaviour


def test_build_result_invariants():
    with pytest.raises(ValueError):
        BuildResult(True)
    with pytest.raises(ValueError):
        BuildResult(False)
    with pytest.raises(ValueError):
        BuildResult(True, 1.0, 1.0, failure=FailureCategory.OTHER)
    ok = BuildResult(True, 7.5, 2.0, (1.0, 2.0, 3.0), "log")
    assert BuildResult.from_json(json.loads(json.dumps(ok.to_json()))) == ok


def test_behavior_preserved_examples():
    a = parse('FROM node\nCOPY . /app\nCMD ["node","a"]\n')
    b = parse('FROM node\nCOPY . /app\nCMD ["node","b"]\n')
    assert behavior_preserved(a, a)
    assert not behavior_preserved(a, b) and not behavior_preserved(b, a)
    merged_before = parse("FROM x\nRUN a\nRUN b\nCOPY . /app\nCMD run\n")
    merged_after = parse("FROM x\nRUN a && b\nCOPY . /app\nCMD run\n")
    assert behavior_preserved(merged_before, merged_after)


# ---------------------------------------------------------------------------
# measurement with a fake engine


def test_measure_three_runs(tmp_path, fake_engine, fake_clock):
    result = build_and_measure("FROM alpine:3.19\nRUN true\n", tmp_path, MeasurementConfig(runs=3),
                               engine=fake_engine, clock=fake_clock)
    assert result.success
    assert len(result.per_run_durations_s) == 3
    assert abs(sum(result.per_run_durations_s) / 3 - result.build_duration_s) < 1e-9
    assert result.image_size_mb == pytest.approx(17.0)
    assert fake_engine.images == {}  # tagged images cleaned up
    assert fake_engine.pulled == ["alpine:3.19"]
    assert len(fake_engine.builds) == 3


def test_pull_time_included_on_request(tmp_path, fake_engine, fake_clock):
    build_and_measure("FROM alpine:3.19\n", tmp_path, MeasurementConfig(runs=1, include_pull_time=True),
                      engine=fake_engine, clock=fake_clock)
    assert fake_engine.pulled == []


def test_measure_stops_at_first_failure(tmp_path, fake_engine, fake_clock):
    result = build_and_measure("FROM alpine:3.19\nCOPY missing.txt /x\n", tmp_path, MeasurementConfig(runs=3),
                               engine=fake_engine, clock=fake_clock)
    assert not result.success
    assert result.failure is FailureCategory.BUILD_CONTEXT
    assert len(fake_engine.builds) == 1


def test_measure_writes_logs(tmp_path, fake_engine, fake_clock):
    ctx = tmp_path / "ctx"
    ctx.mkdir()
    build_and_measure("FROM alpine\n", ctx, MeasurementConfig(runs=2), engine=fake_engine, clock=fake_clock,
                      log_dir=tmp_path / "logs")
    assert len(list((tmp_path / "logs").iterdir())) == 2


def test_missing_context(tmp_path, fake_engine):
    with pytest.raises(ContextError):
        build_and_measure("FROM alpine\n", tmp_path / "nope", engine=fake_engine)


def test_unreachable_engine(tmp_path):
    with pytest.raises(EngineUnavailable):
        build_and_measure("FROM alpine\n", tmp_path, engine=FakeEngine(reachable=False))


def test_unreachable_socket(tmp_path):
    config = MeasurementConfig(engine_endpoint=f"unix://{tmp_path}/absent.sock")
    with pytest.raises(EngineUnavailable):
        build_and_measure("FROM alpine\n", tmp_path, config)


def test_measurement_config_validation():
    with pytest.raises(ValueError):
        MeasurementConfig(runs=0)
    with pytest.raises(ValueError):
        MeasurementConfig(timeout_s=0)


# ---------------------------------------------------------------------------
# engine HTTP API through a mock transport


class FakeApi:
    def __init__(self, fail_log: str | None = None):
        self.fail_log = fail_log
        self.calls = []
        self.contexts = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls.append((request.method, request.url.path, dict(request.url.params)))
        path = request.url.path
        if path == "/_ping":
            return httpx.Response(200, text="OK")
        if path == "/images/create":
            return httpx.Response(200, text='{"status":"Pulling"}\n{"status":"Done"}\n')
        if path == "/build":
            with tarfile.open(fileobj=io.BytesIO(request.content)) as tar:
                self.contexts.append(sorted(tar.getnames()))
            if self.fail_log:
                body = json.dumps({"stream": "Step 1/2\n"}) + "\r\n" + json.dumps({"error": self.fail_log})
            else:
                body = "\n".join(json.dumps(e) for e in (
                    {"stream": "Step 1/1 : FROM alpine:3.19\n"},
                    {"aux": {"ID": "sha256:abc"}},
                    {"stream": "Successfully built abc\n"},
                ))
            return httpx.Response(200, text=body)
        if path.startswith("/images/") and path.endswith("/json"):
            return httpx.Response(200, json={"Size": 7_380_000})
        if request.method == "DELETE":
            return httpx.Response(200, json=[])
        return httpx.Response(404, json={"message": "not found"})


def test_api_engine_build_measure(tmp_path):
    (tmp_path / "app.txt").write_text("x")
    api = FakeApi()
    engine = ApiEngine("tcp://engine:2375", transport=httpx.MockTransport(api))
    clock = iter(range(0, 100, 5))
    result = build_and_measure("FROM alpine:3.19\n", tmp_path, MeasurementConfig(runs=3), engine=engine,
                               clock=lambda: next(clock))
    assert result.success
    assert result.image_size_mb == pytest.approx(7.38)
    assert result.per_run_durations_s == (5, 5, 5)
    builds = [c for c in api.calls if c[1] == "/build"]
    assert len(builds) == 3 and all(c[2]["nocache"] == "1" for c in builds)
    assert ("POST", "/images/create", {"fromImage": "alpine", "tag": "3.19"}) in api.calls
    assert api.contexts[0] == [".dockrefactor.Dockerfile", "app.txt"]
    assert sum(1 for c in api.calls if c[0] == "DELETE") == 3


def test_api_engine_error_stream(tmp_path):
    api = FakeApi(fail_log="failed to compute cache key: \"/missing.txt\": not found")
    engine = ApiEngine("tcp://engine:2375", transport=httpx.MockTransport(api))
    result = build_and_measure("FROM alpine\nCOPY missing.txt /x\n", tmp_path, MeasurementConfig(runs=3),
                               engine=engine)
    assert not result.success and result.failure is FailureCategory.BUILD_CONTEXT
    assert "Step 1/2" in result.log


def test_api_engine_unreachable():
    def refuse(request):
        raise httpx.ConnectError("connection refused", request=request)
    engine = ApiEngine("tcp://engine:2375", transport=httpx.MockTransport(refuse))
    with pytest.raises(EngineUnavailable):
        engine.ping()


def test_context_tar_includes_dockerfile(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "f").write_text("1")
    with tarfile.open(fileobj=io.BytesIO(context_tar(tmp_path, "FROM a\n"))) as tar:
        names = tar.getnames()
        assert tar.extractfile(".dockrefactor.Dockerfile").read() == b"FROM a\n"
    assert {"sub", "sub/f"} <= set(names)


def test_fake_clock_is_shared():
    clock = FakeClock()
    engine = FakeEngine(clock)
    assert engine.clock is clock
