"""noduleagent/config.py.

Pipeline configuration: backend specs per role, stage parameters, knowledge
corpus and memory locations, loaded from a single JSON file.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from glob import glob
from os import getenv
from os.path import abspath, dirname, isabs, join
from typing import Dict, List, Optional

from noduleagent.backend import Backend, BackendSpec, build_backend
from noduleagent.backend.fanout import DEFAULT_WORKERS
from noduleagent.das import DEFAULT_MAX_ROUNDS, SCHEMES
from noduleagent.evaluation import DEFAULT_IOU_THRESHOLD
from noduleagent.exceptions import ConfigError
from noduleagent.knowledge import DEFAULT_TOP_K
from noduleagent.memory import LogicalClock, wall_clock
from noduleagent.radiologist import DEFAULT_MARGIN_FACTOR
from noduleagent.spotter import ClusterParams, SpotterStages

logger = logging.getLogger(__name__)

CONFIG_ENV = "NODULEAGENT_CONFIG"
"""Environment variable naming the configuration file when none is given."""

DEFAULT_CORPUS = tuple(sorted(glob(join(dirname(__file__), "static", "corpus", "*.md"))))
"""Pathology notes shipped with the package."""

DEFAULT_AGENTS = 5


@dataclass
class PipelineBackends:
    """Live backend handles, grouped by the stage that uses them."""

    experts: List[Backend]
    judges: List[Backend]
    describer: Backend
    agents: List[Backend]
    summarizer: Backend
    extractor: Optional[Backend] = None
    answerer: Optional[Backend] = None


@dataclass
class PipelineConfig:
    """Everything a run needs.

    Backends are declared once in `backends` and referenced by id from the
    role lists.  A single agent id stands for `agents_k` replicas of that
    agent, numbered `<id>-1` ... `<id>-K` with consecutive seeds.  Backend
    seeds are offsets added to the run `seed`.
    """

    backends: Dict[str, BackendSpec]
    experts: List[str]
    judges: List[str]
    describer: str
    agents: List[str]
    summarizer: str
    extractor: Optional[str] = None
    answerer: Optional[str] = None
    cluster: ClusterParams = field(default_factory=ClusterParams)
    stages: SpotterStages = field(default_factory=SpotterStages)
    margin_factor: float = DEFAULT_MARGIN_FACTOR
    agents_k: int = DEFAULT_AGENTS
    max_rounds: int = DEFAULT_MAX_ROUNDS
    link_iou: float = 0.3
    scheme: str = "three-class"
    corpus: List[str] = field(default_factory=lambda: list(DEFAULT_CORPUS))
    knowledge_graph: Optional[str] = None
    memory_root: Optional[str] = None
    seed: int = 0
    workers: int = DEFAULT_WORKERS
    top_k: int = DEFAULT_TOP_K
    iou_threshold: float = DEFAULT_IOU_THRESHOLD

    def __post_init__(self):
        for backend_id, spec in self.backends.items():
            if spec.backend_id != backend_id:
                raise ConfigError(f"backend key {backend_id!r} names spec {spec.backend_id!r}")
        roles = {
            "detector": self.experts,
            "judge": self.judges + ([self.answerer] if self.answerer else []),
            "describer": [self.describer],
            "agent": self.agents,
            "summarizer": [self.summarizer],
            "extractor": [self.extractor] if self.extractor else [],
        }
        for role, ids in roles.items():
            for backend_id in ids:
                if backend_id not in self.backends:
                    raise ConfigError(f"undefined {role} backend {backend_id!r}")
                if self.backends[backend_id].role != role:
                    raise ConfigError(
                        f"backend {backend_id!r} has role "
                        f"{self.backends[backend_id].role!r}, not {role!r}"
                    )
        if not self.experts:
            raise ConfigError("at least one detector expert is required")
        if self.stages.judging and not self.judges:
            raise ConfigError("at least one judge is required unless judging is disabled")
        if not self.agents:
            raise ConfigError("at least one agent is required")
        if len(self.agents) > 1 and len(self.agents) != self.agents_k:
            raise ConfigError(f"{len(self.agents)} agents listed but agents_k is {self.agents_k}")
        if self.agents_k < 1:
            raise ConfigError(f"agents_k must be positive, got {self.agents_k}")
        if self.max_rounds < 1:
            raise ConfigError(f"max_rounds must be positive, got {self.max_rounds}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown grading scheme {self.scheme!r}")
        if self.margin_factor < 1:
            raise ConfigError(f"margin_factor must be at least 1, got {self.margin_factor}")
        if not 0.0 < self.link_iou <= 1.0:
            raise ConfigError(f"link_iou must lie in (0, 1], got {self.link_iou}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be positive, got {self.top_k}")
        if self.workers < 1:
            raise ConfigError(f"workers must be positive, got {self.workers}")

    @classmethod
    def inflate(cls, data, base_dir=None):
        """Builds a config from parsed JSON.  Relative file paths are resolved
        against `base_dir`."""
        data = dict(data)

        def resolve(path):
            if path is None or base_dir is None or isabs(path):
                return path
            return abspath(join(base_dir, path))

        try:
            backends = {}
            for backend_id, spec in data.pop("backends").items():
                spec = {"backend_id": backend_id, **spec}
                if spec.get("fixture"):
                    spec["fixture"] = resolve(spec["fixture"])
                backends[backend_id] = BackendSpec.inflate(spec)
            if "cluster" in data:
                data["cluster"] = ClusterParams.inflate(data["cluster"])
            if "stages" in data:
                data["stages"] = SpotterStages(**data["stages"])
            if "corpus" in data:
                data["corpus"] = [resolve(p) for p in data["corpus"]]
            for key in ("knowledge_graph", "memory_root"):
                if key in data:
                    data[key] = resolve(data[key])
            return cls(backends=backends, **data)
        except (KeyError, TypeError, ValueError, AttributeError) as err:
            raise ConfigError(f"malformed configuration: {err}") from err

    def to_json(self):
        data = asdict(self)
        data["backends"] = {
            backend_id: {k: v for k, v in spec.to_json().items() if k != "backend_id"}
            for backend_id, spec in self.backends.items()
        }
        return data

    @classmethod
    def default_mock(cls, seed=0):
        """The all-mock configuration: three threshold experts, one shifted by a
        pixel, three intensity judges and five heuristic agents."""
        specs = [
            BackendSpec("expert-plain", "detector", kind="threshold"),
            BackendSpec("expert-soft", "detector", kind="threshold",
                        options={"threshold_hu": -500}),
            BackendSpec("expert-shift", "detector", kind="threshold",
                        options={"perturb": "shift"}),
            BackendSpec("judge-1", "judge", kind="intensity"),
            BackendSpec("judge-2", "judge", kind="intensity", options={"accept_hu": -500}),
            BackendSpec("judge-3", "judge", kind="intensity", options={"accept_hu": -300}),
            BackendSpec("describer", "describer", kind="template"),
            BackendSpec("agent", "agent", kind="heuristic"),
            BackendSpec("summarizer", "summarizer", kind="tally"),
            BackendSpec("extractor", "extractor", kind="lexicon"),
        ]
        return cls(
            backends={s.backend_id: s for s in specs},
            experts=["expert-plain", "expert-soft", "expert-shift"],
            judges=["judge-1", "judge-2", "judge-3"],
            describer="describer",
            agents=["agent"],
            summarizer="summarizer",
            extractor="extractor",
            seed=seed,
        )

    @property
    def all_mock(self):
        return all(spec.transport == "mock" for spec in self.backends.values())

    def clock(self):
        """Memory timestamps: a logical clock for mock runs, so that their
        output is reproducible, and UTC wall time otherwise."""
        return LogicalClock() if self.all_mock else wall_clock

    def agent_specs(self) -> List[BackendSpec]:
        if len(self.agents) > 1:
            return [self.backends[a] for a in self.agents]
        spec = self.backends[self.agents[0]]
        if self.agents_k == 1:
            return [spec]
        return [
            replace(spec, backend_id=f"{spec.backend_id}-{i + 1}", seed=spec.seed + i)
            for i in range(self.agents_k)
        ]

    def _build(self, spec: BackendSpec) -> Backend:
        return build_backend(replace(spec, seed=spec.seed + self.seed))

    def build_backends(self) -> PipelineBackends:
        logger.info("building %d backend specs", len(self.backends))
        return PipelineBackends(
            experts=[self._build(self.backends[b]) for b in self.experts],
            judges=[self._build(self.backends[b]) for b in self.judges],
            describer=self._build(self.backends[self.describer]),
            agents=[self._build(spec) for spec in self.agent_specs()],
            summarizer=self._build(self.backends[self.summarizer]),
            extractor=self._build(self.backends[self.extractor]) if self.extractor else None,
            answerer=self._build(self.backends[self.answerer]) if self.answerer else None,
        )


def config_path(path=None):
    """The explicit path, else the `NODULEAGENT_CONFIG` path, else None."""
    return path or getenv(CONFIG_ENV) or None


def load_config(path=None) -> PipelineConfig:
    path = config_path(path)
    if path is None:
        raise ConfigError(f"no configuration file given and {CONFIG_ENV} is unset")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"unreadable configuration {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"configuration {path} is not a JSON object")
    config = PipelineConfig.inflate(data, base_dir=dirname(abspath(path)))
    logger.info("configuration loaded from %s", path)
    return config
