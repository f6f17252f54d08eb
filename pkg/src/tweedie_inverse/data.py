"""Image I/O, patch datasets and the binary checkpoint / measurement containers.

Checkpoint layout (all integers little-endian)::

    b"TWSV"  u32 version
    u32 depth  u32 channels  u32 kernel_size  u32 input_channels
    u32 tensor count
    per tensor: u32 name length, utf-8 name, u32 rank, rank x u64 dims,
                numel x f32 values
    u32 CRC32 of every preceding byte

Measurement files share the tensor records but start with b"TWSM", the
version, and a length-prefixed JSON metadata block holding the operator
descriptor.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .denoiser import BiasFreeCNN, BiasFreeCNNConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TWSV"
MEASUREMENT_MAGIC = b"TWSM"
FORMAT_VERSION = 1


class PNGError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --- PNG ---------------------------------------------------------------

def decode_png(data: bytes) -> torch.Tensor:
    """Decode 8- or 16-bit grayscale/RGB PNG bytes to a float32 (C, H, W) tensor in [0, 1]."""
    if not data.startswith(b"\x89PNG\r\n\x1a\n"):
        raise PNGError("not a PNG stream")
    img = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise PNGError("malformed PNG")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise PNGError(f"unsupported sample type {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.shape[2] == 2:
        log.warning("dropping alpha channel")
        img = img[:, :, :1]
    elif img.shape[2] == 4:
        log.warning("dropping alpha channel")
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    elif img.shape[2] == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    else:
        raise PNGError(f"unsupported channel count {img.shape[2]}")
    arr = np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / np.float32(scale)
    return torch.from_numpy(arr)


def encode_png(image: torch.Tensor) -> bytes:
    """Clamp to [0, 1], quantize to 8 bits and encode."""
    arr = image.detach().to(torch.float64).clamp(0, 1).numpy()
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise PNGError(f"expected a (1|3, H, W) image, got {arr.shape}")
    q = np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if q.shape[2] == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(q), [cv2.IMWRITE_PNG_COMPRESSION, 6])
    if not ok:
        raise PNGError("encoding failed")
    return buf.tobytes()


def read_png(path) -> torch.Tensor:
    return decode_png(Path(path).read_bytes())


def write_png(path, image: torch.Tensor) -> None:
    atomic_write(path, encode_png(image))


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- datasets --------------------------------------------------------------

def augment(patch: np.ndarray, hflip: bool, vflip: bool, quarter_turns: int) -> np.ndarray:
    if hflip:
        patch = patch[:, :, ::-1]
    if vflip:
        patch = patch[:, ::-1, :]
    return np.rot90(patch, quarter_turns, axes=(1, 2))


@dataclass
class PatchDataset:
    """Random crops of a list of (C, H, W) images, reproducible per epoch."""

    images: list[np.ndarray]
    crop_size: int
    flips: bool = True
    rotations: bool = True
    seed: int = 0
    names: list[str] | None = None

    def __post_init__(self):
        if not self.images:
            raise ValueError("dataset has no images")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    def __len__(self):
        return len(self.images)

    @staticmethod
    def crop_corner(rng: np.random.Generator, height: int, width: int, crop: int) -> tuple[int, int]:
        return int(rng.integers(0, height - crop + 1)), int(rng.integers(0, width - crop + 1))

    def epoch_patches(self, epoch: int) -> torch.Tensor:
        """One crop per image, in a shuffled order drawn from (seed, epoch)."""
        rng = np.random.default_rng((self.seed, epoch))
        c = self.crop_size
        out = []
        for i in rng.permutation(len(self.images)):
            img = self.images[i]
            top, left = self.crop_corner(rng, img.shape[1], img.shape[2], c)
            patch = img[:, top:top + c, left:left + c]
            hflip = bool(rng.integers(2)) if self.flips else False
            vflip = bool(rng.integers(2)) if self.flips else False
            turns = int(rng.integers(4)) if self.rotations else 0
            out.append(np.ascontiguousarray(augment(patch, hflip, vflip, turns)))
        return torch.from_numpy(np.stack(out))

    def batches(self, epoch: int, batch_size: int):
        patches = self.epoch_patches(epoch)
        for start in range(0, len(patches), batch_size):
            yield patches[start:start + batch_size]

    def all_images(self) -> torch.Tensor:
        """Stack of the uncropped images; they must share one size."""
        return torch.from_numpy(np.stack(self.images))


def load_dataset(directory, crop_size: int, flips: bool = True, rotations: bool = True,
                 seed: int = 0) -> PatchDataset:
    directory = Path(directory)
    files = sorted(directory.glob("*.png"))
    if not files:
        raise ValueError(f"no PNG images in {directory}")
    images, names = [], []
    for f in files:
        img = read_png(f).numpy()
        if min(img.shape[1:]) < crop_size:
            log.warning("skipping %s: smaller than crop %d", f.name, crop_size)
            continue
        images.append(img)
        names.append(f.stem)
    if not images:
        raise ValueError(f"every image in {directory} is smaller than {crop_size}")
    return PatchDataset(images, crop_size, flips, rotations, seed, names)


def bundled_corpus(split: str) -> Path:
    """Path of the small public-domain patch set shipped with the package ("train" or "test")."""
    path = Path(__file__).parent / "corpus" / split
    if not path.is_dir():
        raise FileNotFoundError(path)
    return path


# --- binary containers ---------------------------------------------------

def _pack_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data, self.pos = data, offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack_tensors(reader: _Reader) -> dict[str, torch.Tensor]:
    out = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        numel = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(reader.take(4 * numel), dtype="<f4").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    return out


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _open_sealed(data: bytes, magic: bytes) -> _Reader:
    if len(data) < 12:
        raise CheckpointError("truncated file")
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    body, stored = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CheckpointError("CRC mismatch: file is corrupted or truncated")
    reader = _Reader(body, 4)
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    return reader


def checkpoint_bytes(model: BiasFreeCNN) -> bytes:
    cfg = model.config
    header = CHECKPOINT_MAGIC + struct.pack("<5I", FORMAT_VERSION, cfg.depth, cfg.channels,
                                            cfg.kernel_size, cfg.input_channels)
    return _seal(header + _pack_tensors(dict(model.state_dict())))


def save_checkpoint(model: BiasFreeCNN, path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def load_checkpoint(path) -> BiasFreeCNN:
    data = Path(path).read_bytes()
    reader = _open_sealed(data, CHECKPOINT_MAGIC)
    depth, channels, kernel, in_ch = (reader.u32() for _ in range(4))
    tensors = _unpack_tensors(reader)
    if reader.pos != len(data) - 4:
        raise CheckpointError("trailing bytes after tensor records")
    model = BiasFreeCNN(BiasFreeCNNConfig(depth, channels, kernel, in_ch))
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"parameters do not match the architecture: {exc}") from None
    model.eval()
    return model


def save_measurement(path, xc: torch.Tensor, metadata: dict) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    header = MEASUREMENT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta)) + meta
    atomic_write(path, _seal(header + _pack_tensors({"xc": xc})))


def load_measurement(path) -> tuple[torch.Tensor, dict]:
    reader = _open_sealed(Path(path).read_bytes(), MEASUREMENT_MAGIC)
    meta = json.loads(reader.take(reader.u32()).decode("utf-8"))
    tensors = _unpack_tensors(reader)
    if "xc" not in tensors:
        raise CheckpointError("measurement file lacks the xc tensor")
    return tensors["xc"], meta
