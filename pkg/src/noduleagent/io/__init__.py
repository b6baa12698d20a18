"""noduleagent/io/__init__.py.

Broadcast imports for the file formats.  The volume reader/writer lives in
`noduleagent.io.volume`, which depends on `noduleagent.imaging`.
"""

from .base import MaskRLE, VolumeHeader
