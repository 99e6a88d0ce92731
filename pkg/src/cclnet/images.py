"""Image file I/O and numpy <-> torch layout helpers."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS


def list_images(directory: str | Path) -> list[Path]:
    """Image files in ``directory``, sorted by file name."""
    directory = Path(directory)
    return sorted((p for p in directory.iterdir() if is_image(p)), key=lambda p: p.name)


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as float32 HxWx3 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 array -> 3xHxW tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))).to(dtype)


def to_numpy(img: torch.Tensor) -> np.ndarray:
    """3xHxW (or 1x3xHxW) tensor -> HxWx3 float array."""
    if img.dim() == 4:
        if img.shape[0] != 1:
            raise ValueError("to_numpy expects a single image")
        img = img[0]
    return img.detach().cpu().permute(1, 2, 0).numpy()
