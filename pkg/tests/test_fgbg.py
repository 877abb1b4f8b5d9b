import time
from dataclasses import replace

import numpy as np
import pytest

from robustmc.fgbg import (
    QUANTUM,
    FrameStack,
    PgmError,
    default_config,
    foreground_masks,
    load_frames,
    quantize,
    read_pgm,
    save_separation,
    separate,
    synthetic_scene,
    write_frames,
    write_pgm,
)
from robustmc.operators import read_coo


def rmse(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


def scene_scores(sep, mask, truth_bg):
    found = np.zeros(mask.shape, bool)
    found[sep.foreground.rows, sep.foreground.cols] = True
    recall = (found & mask).sum() / mask.sum()
    precision = (found & mask).sum() / max(found.sum(), 1)
    return rmse(sep.background.data, truth_bg), recall, precision


def background_of(stack, mask):
    # every pixel shows the background in most frames; take the per-pixel median over those
    bg = np.array([np.median(row[~m]) for row, m in zip(stack.data, mask)])
    return np.repeat(bg[:, None], stack.nframes, axis=1)


# ---------------------------------------------------------------- PGM I/O

def test_pgm_single_frame(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0, 255], [128, 64]], dtype=np.uint8))
    stack = load_frames([tmp_path / "a.pgm"])
    np.testing.assert_allclose(stack.data[:, 0], [0, 1, 128 / 255, 64 / 255])
    assert (stack.width, stack.height, stack.nframes) == (2, 2, 1)


def test_pgm_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n3 1\n# max\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(read_pgm(path), [[1, 2, 3]])


@pytest.mark.parametrize(
    "payload",
    [b"P2\n1 1\n255\n\x00", b"P5\n1 1\n65535\n\x00\x00", b"P5\n2 2\n255\n\x00", b"P5\n1", b"P5\nx 1\n255\n\x00"],
)
def test_pgm_malformed(tmp_path, payload):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(PgmError):
        read_pgm(tmp_path / "bad.pgm")


def test_load_frames_errors(tmp_path):
    with pytest.raises(ValueError):
        load_frames([])
    write_pgm(tmp_path / "a.pgm", np.zeros((2, 2), np.uint8))
    write_pgm(tmp_path / "b.pgm", np.zeros((3, 2), np.uint8))
    with pytest.raises(ValueError):
        load_frames([tmp_path / "a.pgm", tmp_path / "b.pgm"])


def test_write_round_trip(tmp_path, rng):
    stack = FrameStack(7, 5, rng.random((35, 4)))
    paths = write_frames(stack, tmp_path)
    back = load_frames(paths)
    assert np.abs(back.data - stack.data).max() <= QUANTUM
    np.testing.assert_array_equal(back.frame(2).shape, (5, 7))


def test_write_clamps(tmp_path):
    stack = FrameStack(2, 1, np.array([[-0.5], [1.7]]))
    back = load_frames(write_frames(stack, tmp_path))
    np.testing.assert_array_equal(back.data[:, 0], [0.0, 1.0])
    np.testing.assert_array_equal(quantize([-1.0, 0.5, 2.0]), [0, 128, 255])


def test_empty_stack_rejected():
    with pytest.raises(ValueError):
        FrameStack(2, 2, np.zeros((4, 0)))
    with pytest.raises(ValueError):
        FrameStack.from_frames([])


def test_frame_order_preserved(tmp_path):
    frames = [np.full((3, 3), v, dtype=np.uint8) for v in (10, 200, 30)]
    paths = []
    for j, f in enumerate(frames):
        paths.append(tmp_path / f"f{j}.pgm")
        write_pgm(paths[-1], f)
    stack = load_frames(paths)
    np.testing.assert_allclose(stack.data[0], np.array([10, 200, 30]) / 255)


# ---------------------------------------------------------------- scene

def test_synthetic_scene_rank_one_off_box():
    stack, mask = synthetic_scene(nframes=10)
    assert mask.mean() == pytest.approx(110 / 48 ** 2)
    bg = background_of(stack, mask)
    np.testing.assert_allclose(np.where(mask, bg, stack.data), bg)
    assert np.linalg.matrix_rank(bg) == 1


# ---------------------------------------------------------------- separation

@pytest.mark.parametrize("p", [0.3, 0.5])
def test_static_scene_background_exact(p):
    # with few frames, pixels sampled far from the mean rate can be absorbed into the sparse part
    stack, _ = synthetic_scene(nframes=120, amplitude=0.0)
    sep = separate(stack, p)
    assert np.abs(sep.background.data - stack.data).max() <= 1e-3
    assert sep.foreground.nnz <= 0.001 * stack.data.size


def test_moving_box_separation():
    stack, mask = synthetic_scene(seed=2)
    sep = separate(stack, 0.3, seed=2)
    err, recall, precision = scene_scores(sep, mask, background_of(stack, mask))
    assert err <= 1e-2 and recall >= 0.95


def test_subsampled_faster_same_background():
    stack, mask = synthetic_scene(nframes=200, seed=1)
    # at p = 0.1 the mu/sqrt(n) floor exceeds the box amplitude; the mu/n scale does not
    cfg = replace(default_config(stack), threshold_scale="n")
    t0 = time.perf_counter()
    full = separate(stack, 1.0, config=cfg)
    t_full = time.perf_counter() - t0
    t0 = time.perf_counter()
    sub = separate(stack, 0.1, config=cfg)
    t_sub = time.perf_counter() - t0
    assert rmse(full.background.data, sub.background.data) <= 1e-2
    assert t_sub < t_full


def test_separate_validation():
    stack, _ = synthetic_scene(nframes=5)
    with pytest.raises(ValueError):
        separate(stack, 0.0)
    with pytest.raises(ValueError):
        separate(stack, 0.5, rank=6)


def test_separate_deterministic_and_saved(tmp_path):
    stack, _ = synthetic_scene(nframes=20, seed=3)
    a = separate(stack, 0.5, seed=4)
    b = separate(stack, 0.5, seed=4)
    assert np.array_equal(a.background.data, b.background.data)
    assert np.array_equal(a.foreground.vals, b.foreground.vals)
    files = save_separation(a, tmp_path)
    assert len(files) == 2 * 20 + 1
    assert read_coo(tmp_path / "foreground.txt").nnz == a.foreground.nnz
    masks = load_frames(sorted((tmp_path / "mask").glob("*.pgm")))
    np.testing.assert_array_equal(masks.data, foreground_masks(a.background, a.foreground).data)


def test_explicit_threshold():
    stack, _ = synthetic_scene(nframes=20)
    sep = separate(stack, 1.0, threshold=0.25)
    assert sep.threshold == 0.25
    assert np.all(np.abs(sep.foreground.vals) >= 0.25)
