"""noduleagent/backend/http.py.

JSON-over-HTTP transport.  Every role shares one envelope:

    {"role": ..., "backend_id": ..., "prompt": ...,
     "images": {name: base64 PNG}, "masks": {name: RLE},
     "fields": {remaining request fields}}

and the endpoint answers with the role's response object.
"""

import logging
import os
import re

import httpx
import numpy as np

from noduleagent.backend.backend_abc import Backend
from noduleagent.exceptions import BackendTimeout, BackendTransportError, SchemaViolation
from noduleagent.io.base import MaskRLE
from noduleagent.render import png_base64, window_to_uint8

logger = logging.getLogger(__name__)


def _image_payload(array):
    if array.dtype != np.uint8:
        array = window_to_uint8(array)
    return png_base64(array)


def _json_fields(request):
    def convert(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, np.generic):
            return value.item()
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [convert(v) for v in value]
        return value

    return {
        key: convert(value)
        for key, value in request.items()
        if key not in ("prompt", "images", "masks")
    }


def _mask_slice(name, request):
    """Slice index of the mask called `name`: the request's `z_index`, or the
    `z_indices` entry matching a trailing `_<i>` in the name.  Masks without
    either travel as slice 0."""
    if "z_index" in request:
        return int(request["z_index"])
    match = re.search(r"_(\d+)$", name)
    z_indices = request.get("z_indices", ())
    if match and int(match.group(1)) < len(z_indices):
        return int(z_indices[int(match.group(1))])
    return 0


def build_envelope(role, backend_id, request):
    return {
        "role": role,
        "backend_id": backend_id,
        "prompt": request["prompt"],
        "images": {
            name: _image_payload(array)
            for name, array in sorted(request.get("images", {}).items())
        },
        "masks": {
            name: MaskRLE.encode(_mask_slice(name, request), bits).to_json()
            for name, bits in sorted(request.get("masks", {}).items())
        },
        "fields": _json_fields(request),
    }


class HttpBackend(Backend):
    """POSTs one envelope per call.  No retries are attempted.

    A bearer token is read from the environment variable named by
    `spec.options["token_env"]`, when given.
    """

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        token_env = self.spec.options.get("token_env")
        if token_env:
            token = os.getenv(token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
            else:
                logger.warning("%s: %s is unset, sending no token", self.backend_id, token_env)
        return headers

    def _invoke(self, request):
        envelope = build_envelope(self.role, self.backend_id, request)
        try:
            reply = httpx.post(
                self.spec.endpoint,
                json=envelope,
                headers=self._headers(),
                timeout=self.spec.timeout,
            )
            reply.raise_for_status()
        except httpx.TimeoutException as err:
            raise BackendTimeout(
                f"no answer from {self.spec.endpoint} within {self.spec.timeout}s",
                self.backend_id,
            ) from err
        except httpx.HTTPError as err:
            raise BackendTransportError(str(err), self.backend_id) from err

        try:
            return reply.json()
        except ValueError as err:
            raise SchemaViolation(f"response is not JSON: {err}", self.backend_id) from err
