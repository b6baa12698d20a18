"""noduleagent/backend/__init__.py.

Broadcast imports for the backend, and backend construction.
"""

from noduleagent.exceptions import ConfigError

from .backend_abc import ROLES, Backend, BackendSpec
from .fanout import Outcome, fanout, raise_for_failures, responses
from .http import HttpBackend
from .mock import DEFAULT_KINDS, MOCK_KINDS


def build_backend(spec: BackendSpec) -> Backend:
    """Instantiates the backend that `spec` describes."""
    if spec.transport == "http":
        return HttpBackend(spec)

    kind = spec.kind or ("scripted" if spec.fixture else DEFAULT_KINDS[spec.role])
    if kind not in MOCK_KINDS:
        raise ConfigError(f"backend {spec.backend_id}: unknown mock kind {kind!r}")
    return MOCK_KINDS[kind](spec)
