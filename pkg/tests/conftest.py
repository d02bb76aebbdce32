import sys
from pathlib import Path

import pytest

from dockrefactor.dockerfile import Kind, parse

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self) -> float:
        return self.now


class FakeEngine:
    """Deterministic stand-in for a container engine.

    Image size grows with the base image and the number of RUN steps; the
    build "takes" one second per instruction of the final stage. A COPY of a
    source missing from the context fails with a BuildContext-style log.
    """

    BASE_MB = {"alpine": 7, "node": 900, "python": 1000, "debian": 120, "golang": 800}

    def __init__(self, clock: FakeClock | None = None, reachable: bool = True):
        self.endpoint = "fake://engine"
        self.clock = clock or FakeClock()
        self.reachable = reachable
        self.builds: list[str] = []
        self.pulled: list[str] = []
        self.images: dict[str, int] = {}

    def ping(self):
        if not self.reachable:
            from dockrefactor.build import EngineUnavailable
            raise EngineUnavailable("fake engine is down")

    def pull(self, image):
        self.pulled.append(image)

    def build(self, dockerfile_text, context_dir, tag, *, no_cache, network, timeout_s):
        self.builds.append(dockerfile_text)
        ast = parse(dockerfile_text)
        final = ast.final_stage
        for instr in final.body:
            if instr.kind in (Kind.COPY, Kind.ADD) and not instr.has_flag("from"):
                for src in instr.args[:-1]:
                    if not src.startswith("-") and not (Path(context_dir) / src).exists():
                        return False, (f"ERROR: failed to solve: failed to compute cache key: "
                                       f"failed to calculate checksum of ref: \"/{src}\": not found\n")
        self.clock.now += len(final.instructions) * 1.0
        base = self.BASE_MB.get(final.base.name.split("/")[-1], 50)
        if final.base.tag and "slim" in final.base.tag:
            base //= 4
        runs = sum(1 for i in final.body if i.kind is Kind.RUN)
        self.images[tag] = (base + 10 * runs) * 1_000_000
        return True, f"built {tag}\n"

    def image_size(self, tag):
        return self.images[tag]

    def remove(self, tag):
        self.images.pop(tag, None)


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture
def fake_engine(fake_clock):
    return FakeEngine(fake_clock)


@pytest.fixture
def corpus_path():
    return FIXTURES / "corpus.jsonl"


@pytest.fixture
def dockerfile_fixtures():
    return sorted((FIXTURES / "dockerfiles").iterdir())
