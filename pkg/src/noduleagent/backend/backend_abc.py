"""noduleagent/backend/backend_abc.py.

A generic backend specification for the external models of the pipeline.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

from noduleagent.backend.schemas import validate_request, validate_response
from noduleagent.exceptions import BackendError, ConfigError
from noduleagent.utilities import request_hash

logger = logging.getLogger(__name__)

ROLES = ("detector", "judge", "describer", "agent", "summarizer", "extractor")
TRANSPORTS = ("mock", "http")
DEFAULT_TIMEOUT = 60.0


@dataclass
class BackendSpec:
    """Configuration of one backend instance.

    `kind` selects the mock implementation when `transport` is "mock";
    `fixture` names a scripted-response file and `endpoint` an http URL.
    """

    backend_id: str
    role: str
    transport: str = "mock"
    kind: str = ""
    endpoint: Optional[str] = None
    fixture: Optional[str] = None
    timeout: float = DEFAULT_TIMEOUT
    seed: int = 0
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.backend_id:
            raise ConfigError("backend_id must be nonempty")
        if self.role not in ROLES:
            raise ConfigError(f"backend {self.backend_id}: unknown role {self.role!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(
                f"backend {self.backend_id}: unknown transport {self.transport!r}"
            )
        if self.transport == "http" and not self.endpoint:
            raise ConfigError(f"backend {self.backend_id}: http transport needs an endpoint")
        if self.timeout <= 0:
            raise ConfigError(f"backend {self.backend_id}: timeout must be positive")

    @classmethod
    def inflate(cls, data):
        """Converts the `data` produced by `dataclasses.asdict` to a live
        object."""

        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"malformed backend spec {data!r}: {err}") from err

    def to_json(self):
        return asdict(self)


class Backend(ABC):
    """Generic backend interface.  Subclasses implement `_invoke`; callers use
    `call`, which enforces the role's request and response contracts.

    NOTE: Backend handles are shared across threads; `_invoke` may not keep
    per-call state on the instance.
    """

    def __init__(self, spec: BackendSpec):
        self.spec = spec

    @property
    def backend_id(self):
        return self.spec.backend_id

    @property
    def role(self):
        return self.spec.role

    @abstractmethod
    def _invoke(self, request):  # dict -> dict
        """Produces the raw response to a validated request.

        Signals `BackendTimeout` or `BackendTransportError` on failure.
        """
        pass

    def call(self, request):
        """Validates `request`, invokes the backend, and validates the
        response.  Signals `SchemaViolation` on either contract breach."""
        validate_request(self.role, request, self.backend_id)
        logger.debug("%s <- request %s", self.backend_id, request_hash(request)[:12])
        try:
            response = self._invoke(request)
        except BackendError:
            raise
        except Exception as err:
            raise BackendError(f"{type(err).__name__}: {err}", self.backend_id) from err
        return validate_response(self.role, request, response, self.backend_id)

    def __repr__(self):
        return f"{type(self).__name__}({self.backend_id!r}, role={self.role!r})"
