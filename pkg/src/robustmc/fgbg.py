"""Foreground/background separation of grayscale frame sequences.

Frames are binary PGM (P5, maxval 255).  Each frame is flattened row-major into
one column of a (height*width) x nframes matrix with values in [0, 1]; the
low-rank part is the background and the thresholded residual the foreground.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .operators import SparseCoo, write_coo
from .solver import SolverConfig, SolverReport, pass2_default, residual_threshold, rpca

QUANTUM = 1.0 / 255.0


class PgmError(ValueError):
    pass


@dataclass(frozen=True)
class FrameStack:
    width: int
    height: int
    data: np.ndarray  # (height*width, nframes)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] == 0:
            raise ValueError("a frame stack needs at least one frame")
        if data.shape[0] != self.width * self.height:
            raise ValueError(f"{data.shape[0]} rows do not match {self.height}x{self.width} frames")
        object.__setattr__(self, "data", data)

    @property
    def nframes(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def frame(self, j: int) -> np.ndarray:
        return self.data[:, j].reshape(self.height, self.width)

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray]) -> "FrameStack":
        if len(frames) == 0:
            raise ValueError("no frames")
        h, w = np.shape(frames[0])
        for f in frames:
            if np.shape(f) != (h, w):
                raise ValueError(f"frame of shape {np.shape(f)} differs from {(h, w)}")
        return cls(w, h, np.stack([np.asarray(f, dtype=np.float64).ravel() for f in frames], axis=1))


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens after the magic, skipping comments."""
    pos = 2
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise PgmError("truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise PgmError("truncated header")
            pos = end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit():
            raise PgmError(f"bad header token {tok!r}")
        out.append(int(tok))
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmError("missing separator before raster")
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """8-bit raster of a binary PGM as a (height, width) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (P5)")
    (w, h, maxval), start = _tokens(buf, 3)
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise PgmError(f"{path}: empty image")
    raster = buf[start:start + w * h]
    if len(raster) != w * h:
        raise PgmError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-d uint8 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def quantize(values) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_frames(paths: Sequence) -> FrameStack:
    paths = list(paths)
    if not paths:
        raise ValueError("no frame paths given")
    return FrameStack.from_frames([read_pgm(p).astype(np.float64) / 255.0 for p in paths])


def write_frames(stack: FrameStack, directory, prefix: str = "frame") -> List[str]:
    """One PGM per frame, values clamped to [0, 1] then quantized to 8 bits."""
    if stack is None or stack.nframes == 0:
        raise ValueError("empty stack")
    os.makedirs(directory, exist_ok=True)
    digits = max(4, len(str(stack.nframes - 1)))
    out = []
    for j in range(stack.nframes):
        path = os.path.join(directory, f"{prefix}_{j:0{digits}d}.pgm")
        write_pgm(path, quantize(stack.frame(j)))
        out.append(path)
    return out


def default_config(stack: FrameStack, rank: int = 1, seed: int = 0) -> SolverConfig:
    """Solver settings for video: adaptive mu/sqrt(n) threshold scale, tolerance a tenth of one gray level."""
    return SolverConfig(
        epsilon=QUANTUM / 10.0, target_rank=rank, mu=1.0, threshold_scale="sqrt_n", seed=seed,
    )


@dataclass
class Separation:
    background: FrameStack
    foreground: SparseCoo
    threshold: float
    report: SolverReport


def separate(
    stack: FrameStack,
    p: float,
    config: Optional[SolverConfig] = None,
    rank: int = 1,
    seed: int = 0,
    threshold: Optional[float] = None,
) -> Separation:
    """Subsample the stack at rate ``p``, fit the background, threshold the full residual.

    The foreground threshold defaults to the solver's pass-2 threshold, floored at
    one 8-bit quantization step.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    cfg = config if config is not None else default_config(stack, rank, seed)
    if cfg.target_rank > min(stack.shape):
        raise ValueError("rank exceeds the stack dimensions")
    l_hat, _, report = rpca(stack.data, p, cfg, two_pass=False, seed=seed)
    zeta = max(pass2_default(report), QUANTUM) if threshold is None else threshold
    fg = residual_threshold(stack.data, l_hat, zeta)
    bg = FrameStack(stack.width, stack.height, l_hat.toarray())
    return Separation(bg, fg, float(zeta), report)


def foreground_masks(stack_like: FrameStack, fg: SparseCoo) -> FrameStack:
    mask = np.zeros(stack_like.shape)
    mask[fg.rows, fg.cols] = 1.0
    return replace(stack_like, data=mask)


def save_separation(sep: Separation, directory) -> List[str]:
    """background/*.pgm, mask/*.pgm and foreground.txt (sparse text format)."""
    files = write_frames(sep.background, os.path.join(directory, "background"), "bg")
    files += write_frames(foreground_masks(sep.background, sep.foreground), os.path.join(directory, "mask"), "mask")
    path = os.path.join(directory, "foreground.txt")
    write_coo(path, sep.foreground)
    files.append(path)
    return files


def synthetic_scene(
    width: int = 48,
    height: int = 48,
    nframes: int = 60,
    box: Tuple[int, int] = (10, 11),
    amplitude: float = 0.5,
    velocity: Tuple[int, int] = (5, 9),
    seed: int = 0,
) -> Tuple[FrameStack, np.ndarray]:
    """Static textured background plus a box bouncing around the frame.

    The box moves ``velocity`` = (dy, dx) pixels per frame and reflects off the
    borders, so any single pixel is covered in only a few frames.  It adds
    ``amplitude`` to the background, which stays within [0.1, 0.4], and the sum is
    clamped to [0, 1].  Returns the stack and the boolean (pixels x frames)
    foreground mask.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    bg = 0.25 + 0.1 * np.sin(xx / 5.0) * np.cos(yy / 7.0) + 0.05 * rng.random((height, width))
    bg = np.clip(bg, 0.1, 0.4)
    bh, bw = box
    span_y, span_x = height - bh, width - bw
    y0, x0 = int(rng.integers(0, span_y + 1)), int(rng.integers(0, span_x + 1))

    def bounce(start, step, span):
        if span == 0:
            return 0
        pos = (start + step) % (2 * span)
        return pos if pos <= span else 2 * span - pos

    frames, masks = [], []
    for j in range(nframes):
        top = bounce(y0, j * velocity[0], span_y)
        left = bounce(x0, j * velocity[1], span_x)
        m = np.zeros((height, width), dtype=bool)
        m[top:top + bh, left:left + bw] = True
        frames.append(np.clip(bg + amplitude * m, 0.0, 1.0))
        masks.append(m.ravel())
    return FrameStack.from_frames(frames), np.stack(masks, axis=1)


__all__ = [
    "FrameStack", "PgmError", "Separation", "read_pgm", "write_pgm", "quantize", "load_frames",
    "write_frames", "default_config", "separate", "foreground_masks", "save_separation",
    "synthetic_scene",
]
