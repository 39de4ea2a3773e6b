"""Synthetic query-conditioned documents.

Each document is a G x G grid of glyph cells rendered into a 32 x 32 image.
The query asks for one cell, "read cell (r, c)", encoded as the two ids
[r, G + c] over a vocabulary of 2G position words; the label is the glyph
class shown at that cell. Glyphs are 8 x 8 binary bitmaps that differ
pairwise in at least 16 pixels, so they survive the additive pixel noise.

By default every document contains each glyph class the same number of times
(positions shuffled per sample). With the composition balanced, the image
alone carries no information about the answer: without the query, the label
is uniform no matter what the model sees, which pins the no-injection
baseline at chance. An "iid" composition mode (independent uniform cells) is
available for experiments that do not need that guarantee.

On disk, little-endian:

    magic "QIDD" | version u32 | sample count u32
    per sample: image 1024 float32 | query length u16 | ids u16 each
                | answer u16
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .numerics import Rng

MAGIC = b"QIDD"
FORMAT_VERSION = 1

IMAGE_SIDE = 32
CELL_SIDE = 8
GLYPH_INK = 0.9  # bitmap amplitude; leaves headroom for U(0, 0.1) noise


@dataclass
class SynthSample:
    image: np.ndarray  # (32, 32) float32 in [0, 1]
    query_ids: list[int]
    answer: int
    cell_contents: np.ndarray | None  # (G, G) glyph classes; not serialized

    def query_cell(self, grid_size: int) -> tuple[int, int]:
        return self.query_ids[0], self.query_ids[1] - grid_size

    def query_patch(self, grid_size: int) -> int:
        r, c = self.query_cell(grid_size)
        return r * grid_size + c


def glyph_bitmaps(k: int) -> np.ndarray:
    """The first k of eight structured 8 x 8 bitmaps. Pairwise Hamming
    distance is at least 16 (in fact 32 for every pair; asserted in tests)."""
    if not 1 <= k <= 8:
        raise ConfigError(f"glyph_bitmaps: supported class counts are 1..8, got {k}")
    i = np.arange(CELL_SIDE)[:, None]
    j = np.arange(CELL_SIDE)[None, :]
    patterns = [
        np.ones((CELL_SIDE, CELL_SIDE)),  # solid
        (i % 2 == 1),  # horizontal stripes
        (j % 2 == 1),  # vertical stripes
        ((i + j) % 2 == 0),  # checkerboard
        (i < CELL_SIDE // 2),  # top half
        (j < CELL_SIDE // 2),  # left half
        (np.abs(i - j) <= 1),  # diagonal band
        (i % 7 == 0) | (j % 7 == 0),  # border ring
    ]
    full = [np.broadcast_to(p, (CELL_SIDE, CELL_SIDE)) for p in patterns[:k]]
    return np.stack([np.asarray(p, dtype=np.uint8) for p in full])


def encode_query_cell(r: int, c: int, grid_size: int) -> list[int]:
    """(r, c) -> [r, G + c]; injective over the G x G grid."""
    if not (0 <= r < grid_size and 0 <= c < grid_size):
        raise ContractError(f"encode_query_cell: cell ({r}, {c}) outside {grid_size} x {grid_size}")
    return [r, grid_size + c]


def generate_dataset(
    n: int,
    grid_size: int = 4,
    n_classes: int = 8,
    seed: int = 0,
    noise: float = 0.1,
    composition: str = "balanced",
) -> list[SynthSample]:
    """Deterministically generate n samples from the seed alone.

    Each sample derives its own child rng, so regenerating any prefix, or
    generating in parallel, reproduces the same bits.
    """
    if n < 0:
        raise ConfigError(f"generate_dataset: negative sample count {n}")
    if grid_size * CELL_SIDE != IMAGE_SIDE:
        raise ConfigError(
            f"generate_dataset: {grid_size} x {grid_size} cells of {CELL_SIDE} px "
            f"do not tile a {IMAGE_SIDE} px image"
        )
    if composition not in ("balanced", "iid"):
        raise ConfigError(f"generate_dataset: unknown composition '{composition}'")
    n_cells = grid_size * grid_size
    if composition == "balanced" and n_cells % n_classes != 0:
        raise ConfigError(
            f"generate_dataset: balanced composition needs {n_classes} | {n_cells}"
        )
    glyphs = glyph_bitmaps(n_classes)
    base = np.repeat(np.arange(n_classes), n_cells // n_classes) if composition == "balanced" else None
    root = Rng(seed)
    samples = []
    for idx in range(n):
        rng = root.child(f"sample{idx}")
        if composition == "balanced":
            cells = base[rng.permutation(n_cells)].reshape(grid_size, grid_size)
        else:
            cells = rng.integers(0, n_classes, size=n_cells).reshape(grid_size, grid_size)
        r = int(rng.integers(0, grid_size))
        c = int(rng.integers(0, grid_size))
        image = _render(cells, glyphs, rng, noise)
        samples.append(
            SynthSample(
                image=image,
                query_ids=encode_query_cell(r, c, grid_size),
                answer=int(cells[r, c]),
                cell_contents=cells,
            )
        )
    return samples


def _render(cells: np.ndarray, glyphs: np.ndarray, rng: Rng, noise: float) -> np.ndarray:
    grid_size = cells.shape[0]
    image = np.zeros((IMAGE_SIDE, IMAGE_SIDE), dtype=np.float64)
    for r in range(grid_size):
        for c in range(grid_size):
            image[
                r * CELL_SIDE : (r + 1) * CELL_SIDE, c * CELL_SIDE : (c + 1) * CELL_SIDE
            ] = glyphs[cells[r, c]] * GLYPH_INK
    if noise > 0.0:
        image += rng.uniform((IMAGE_SIDE, IMAGE_SIDE)) * noise
    return image.astype(np.float32)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_dataset(samples: list[SynthSample], path: str) -> None:
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<I", FORMAT_VERSION)
    payload += struct.pack("<I", len(samples))
    for s in samples:
        image = np.ascontiguousarray(s.image, dtype="<f4")
        if image.shape != (IMAGE_SIDE, IMAGE_SIDE):
            raise ContractError(f"write_dataset: image shape {image.shape} is not 32 x 32")
        payload += image.tobytes()
        payload += struct.pack("<H", len(s.query_ids))
        for i in s.query_ids:
            payload += struct.pack("<H", i)
        payload += struct.pack("<H", s.answer)
    with open(path, "wb") as f:
        f.write(payload)


def read_dataset(path: str) -> list[SynthSample]:
    """Read samples back. Generation metadata (cell_contents) is not part of
    the format and comes back as None."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4
    version, pos = _read(blob, pos, "<I", path)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    count, pos = _read(blob, pos, "<I", path)
    image_bytes = IMAGE_SIDE * IMAGE_SIDE * 4
    samples = []
    for _ in range(count):
        raw = _take(blob, pos, image_bytes, path)
        pos += image_bytes
        image = np.frombuffer(raw, dtype="<f4").reshape(IMAGE_SIDE, IMAGE_SIDE).astype(np.float32)
        q_len, pos = _read(blob, pos, "<H", path)
        ids = []
        for _ in range(q_len):
            i, pos = _read(blob, pos, "<H", path)
            ids.append(i)
        answer, pos = _read(blob, pos, "<H", path)
        samples.append(SynthSample(image=image, query_ids=ids, answer=answer, cell_contents=None))
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after last sample")
    return samples


def _read(blob: bytes, pos: int, fmt: str, path: str) -> tuple[int, int]:
    size = struct.calcsize(fmt)
    raw = _take(blob, pos, size, path)
    return struct.unpack(fmt, raw)[0], pos + size


def _take(blob: bytes, pos: int, n: int, path: str) -> bytes:
    if pos + n > len(blob):
        raise FormatError(f"{path}: truncated file ({len(blob)} bytes, need {pos + n})")
    return blob[pos : pos + n]
