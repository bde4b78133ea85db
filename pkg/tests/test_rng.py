import numpy as np

from npvol import rng


def test_derive_seed_stable_and_contextual():
    assert rng.derive_seed(1, "path", 3) == rng.derive_seed(1, "path", 3)
    assert rng.derive_seed(1, "path", 3) != rng.derive_seed(1, "path", 4)
    assert rng.derive_seed(1, "path", 3) != rng.derive_seed(2, "path", 3)
    assert 0 <= rng.derive_seed(0) < 2 ** 64


def test_streams_are_independent_of_draw_order():
    a = rng.stream(5, "x").random(4)
    _ = rng.stream(5, "y").random(100)
    b = rng.stream(5, "x").random(4)
    assert np.array_equal(a, b)


def test_normals_shapes_and_moments():
    gen = rng.stream(0, "moments")
    z = rng.normals(gen, (100_000,))
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.02
    # odd sizes and multi-dim shapes fill correctly
    assert rng.normals(rng.stream(1, "odd"), (7,)).shape == (7,)
    assert rng.normals(rng.stream(1, "mat"), (3, 5)).shape == (3, 5)


def test_normals_deterministic():
    a = rng.normals(rng.stream(9, "d"), (11,))
    b = rng.normals(rng.stream(9, "d"), (11,))
    assert np.array_equal(a, b)


def test_parallel_map_preserves_order(monkeypatch):
    items = list(range(20))
    serial = rng.parallel_map(lambda x: x * x, items)
    monkeypatch.setenv("NPV_THREADS", "4")
    threaded = rng.parallel_map(lambda x: x * x, items)
    assert serial == threaded == [x * x for x in items]


def test_thread_count_parsing(monkeypatch):
    monkeypatch.delenv("NPV_THREADS", raising=False)
    assert rng.thread_count() == 1
    monkeypatch.setenv("NPV_THREADS", "6")
    assert rng.thread_count() == 6
    monkeypatch.setenv("NPV_THREADS", "junk")
    assert rng.thread_count() == 1
