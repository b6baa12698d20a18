"""noduleagent/render.py.

Utilities for rendering slices and masks into the 8-bit images sent to
vision-language backends.
"""

import base64
from io import BytesIO

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

WINDOW_CENTER_HU = -600
WINDOW_WIDTH_HU = 1500


def window_to_uint8(pixels, center=WINDOW_CENTER_HU, width=WINDOW_WIDTH_HU):
    """Maps Hounsfield units to grayscale through a fixed lung window."""
    low = center - width / 2
    scaled = (np.asarray(pixels, dtype=np.float64) - low) / width * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def mask_outline(bits):
    """The one-pixel inner boundary of a binary mask."""
    bits = np.asarray(bits, dtype=bool)
    return bits & ~binary_erosion(bits, border_value=0)


def overlay_outline(image, bits, value=255):
    """Copy of the 8-bit `image` with the outline of `bits` drawn in."""
    overlaid = np.array(image, dtype=np.uint8)
    overlaid[mask_outline(bits)] = value
    return overlaid


def render_candidate(pixels, bits):
    """Windowed slice with the candidate mask drawn as an outline."""
    return overlay_outline(window_to_uint8(pixels), bits)


def encode_png(image) -> bytes:
    buffer = BytesIO()
    # a 2-d uint8 array maps onto Pillow's "L" (8-bit grayscale) mode
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data: bytes):
    return np.array(Image.open(BytesIO(data)).convert("L"))


def png_base64(image) -> str:
    return base64.b64encode(encode_png(image)).decode("ascii")
