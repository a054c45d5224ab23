from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from core.exceptions import ImageReadError


def quantize(image: np.ndarray) -> np.ndarray:
    """Map reals in [0, 1] to 8-bit values."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def dequantize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def save_png(image: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(image)).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    """
    Read an 8-bit RGB PNG as reals in [0, 1].
    Raises:
        ImageReadError: If the file is missing or cannot be decoded.
    """
    try:
        with Image.open(path) as handle:
            pixels = np.asarray(handle.convert("RGB"))
    except (OSError, UnidentifiedImageError) as e:
        raise ImageReadError(f"cannot read image {path}: {e}") from e
    return dequantize(pixels)


def image_to_tensor(image: np.ndarray,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """HxWx3 array to a 1x3xHxW tensor."""
    array = np.ascontiguousarray(image.transpose(2, 0, 1))
    return torch.from_numpy(array).to(dtype).unsqueeze(0)
