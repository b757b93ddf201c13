"""Synthetic corpus generation: embeddings, scenes, tiers, batching, archives."""

from __future__ import annotations

import numpy as np
import pytest

from embseg.labels import block_similarity_summary
from embseg.losses import BoxSupervision, PixelSupervision
from embseg.synth import (
    AnnotatedSample,
    annotate,
    balanced_batches,
    block_assignment,
    gen_scene,
    load_samples,
    make_embeddings,
    make_world,
    prototypes,
    read_pgm,
    save_samples,
    substream,
    write_pgm,
)


def small_world(seed=0, n_blocks=2, per_block=3, dim=8, feature_dim=6, noise=0.0, wc=0.6):
    space = make_embeddings(n_blocks, per_block, dim, wc, seed)
    return make_world(space, feature_dim, noise, seed, blocks=block_assignment(n_blocks, per_block))


# -- embeddings -------------------------------------------------------------------


def test_embeddings_deterministic_and_unit():
    a = make_embeddings(3, 4, 16, 0.8, seed=5)
    b = make_embeddings(3, 4, 16, 0.8, seed=5)
    assert np.array_equal(a.E, b.E)
    assert len(a) == 12
    np.testing.assert_allclose(np.linalg.norm(a.E, axis=1), np.ones(12), atol=1e-6)
    c = make_embeddings(3, 4, 16, 0.8, seed=6)
    assert not np.array_equal(a.E, c.E)


def test_structured_blocks_are_tighter_within():
    space = make_embeddings(3, 4, 16, 0.8, seed=1)
    within, cross = block_similarity_summary(space, block_assignment(3, 4))
    assert within > cross


def test_scrambled_embeddings_nearly_orthogonal():
    space = make_embeddings(3, 4, 64, 0.0, seed=2)
    _, cross = block_similarity_summary(space, block_assignment(3, 4))
    within, _ = block_similarity_summary(space, block_assignment(3, 4))
    assert abs(within) < 0.15
    assert abs(cross) < 0.15


def test_embeddings_validates_arguments():
    with pytest.raises(ValueError):
        make_embeddings(8, 2, 4, 0.5, seed=0)  # dim < n_blocks
    with pytest.raises(ValueError):
        make_embeddings(2, 2, 8, 1.0, seed=0)  # within_corr out of range


def test_substream_independence():
    a = substream(7, "scene").standard_normal(4)
    b = substream(7, "corrupt").standard_normal(4)
    assert not np.array_equal(a, b)
    again = substream(7, "scene").standard_normal(4)
    assert np.array_equal(a, again)


# -- world ------------------------------------------------------------------------


def test_world_conditioning_and_prototypes():
    world = small_world()
    sv = np.linalg.svd(world.A, compute_uv=False)
    assert sv.min() > 1e-6
    protos = prototypes(world)
    assert protos.shape == (6, 6)
    np.testing.assert_allclose(protos[2], world.A @ world.space.E[2], atol=1e-12)


# -- scenes -----------------------------------------------------------------------


def test_scene_rectangles_tile_grid():
    world = small_world()
    scene = gen_scene(world, 13, 9, 7, active=range(6), seed=3)
    coverage = np.zeros((13, 9), dtype=int)
    for box, label in scene.regions:
        coverage[box.row0 : box.row1, box.col0 : box.col1] += 1
        assert np.all(scene.truth[box.row0 : box.row1, box.col0 : box.col1] == label)
    assert np.all(coverage == 1)
    assert len(scene.regions) == 7


def test_scene_noise_free_features_equal_prototypes():
    world = small_world(noise=0.0)
    scene = gen_scene(world, 6, 6, 4, active=[0, 2, 5], seed=4)
    protos = prototypes(world)
    np.testing.assert_array_equal(scene.features, protos[scene.truth])
    assert set(np.unique(scene.truth)) <= {0, 2, 5}


def test_scene_single_region_constant_truth():
    world = small_world()
    scene = gen_scene(world, 5, 4, 1, active=[3], seed=5)
    assert np.all(scene.truth == 3)
    assert len(scene.regions) == 1


def test_scene_covers_all_active_labels_when_possible():
    world = small_world()
    scene = gen_scene(world, 10, 10, 8, active=range(6), seed=6)
    assert set(np.unique(scene.truth)) == set(range(6))


def test_scene_determinism_and_bounds():
    world = small_world()
    a = gen_scene(world, 8, 8, 5, active=range(6), seed=7)
    b = gen_scene(world, 8, 8, 5, active=range(6), seed=7)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.truth, b.truth)
    with pytest.raises(ValueError):
        gen_scene(world, 3, 3, 10, active=[0], seed=0)
    with pytest.raises(ValueError):
        gen_scene(world, 3, 3, 2, active=[], seed=0)


# -- annotation tiers ---------------------------------------------------------------


def test_hd_payload_is_truth():
    world = small_world()
    scene = gen_scene(world, 6, 6, 4, active=range(6), seed=8)
    sample = annotate(world, scene, "HD", dataset_id=1)
    assert isinstance(sample.payload, PixelSupervision)
    assert np.array_equal(sample.payload.labels, scene.truth)
    assert sample.dataset_id == 1


def test_ld_zero_fraction_is_clean():
    world = small_world()
    scene = gen_scene(world, 6, 6, 4, active=range(6), seed=9)
    sample = annotate(world, scene, "LD", corrupt_frac=0.0, seed=1)
    assert np.array_equal(sample.payload.labels, scene.truth)


def test_ld_corruption_count_exact_and_marked():
    world = small_world()
    scene = gen_scene(world, 10, 10, 6, active=range(6), seed=10)
    sample = annotate(world, scene, "LD", corrupt_frac=0.3, seed=2)
    diff = sample.payload.labels != scene.truth
    assert diff.sum() == round(0.3 * 100)
    # truth itself is untouched
    assert np.array_equal(sample.truth, scene.truth)
    present = set(np.unique(scene.truth))
    assert set(np.unique(sample.payload.labels)) <= present


def test_ld_corruption_prefers_boundaries():
    world = small_world()
    scene = gen_scene(world, 12, 12, 6, active=range(6), seed=11)
    sample = annotate(world, scene, "LD", corrupt_frac=0.1, seed=3)
    diff = sample.payload.labels != scene.truth
    t = scene.truth
    boundary = np.zeros_like(diff)
    boundary[1:, :] |= t[1:, :] != t[:-1, :]
    boundary[:-1, :] |= t[:-1, :] != t[1:, :]
    boundary[:, 1:] |= t[:, 1:] != t[:, :-1]
    boundary[:, :-1] |= t[:, :-1] != t[:, 1:]
    n_boundary = boundary.sum()
    # with fewer corruptions than boundary pixels all flips sit on boundaries
    assert diff.sum() <= n_boundary
    assert np.all(boundary[diff])


def test_ld_single_label_scene_cannot_corrupt():
    world = small_world()
    scene = gen_scene(world, 4, 4, 1, active=[2], seed=12)
    sample = annotate(world, scene, "LD", corrupt_frac=0.5, seed=4)
    assert np.array_equal(sample.payload.labels, scene.truth)


def test_wd_exact_teacher_when_noise_free():
    world = small_world()
    scene = gen_scene(world, 8, 8, 5, active=range(6), seed=13)
    sample = annotate(world, scene, "WD", teacher_sigma=0.0, seed=5)
    assert isinstance(sample.payload, BoxSupervision)
    assert sample.payload.count == 5
    for (box, label), teacher in zip(scene.regions, sample.payload.teachers):
        assert np.array_equal(teacher, world.space.E[label])


def test_wd_noisy_teacher_is_unit_and_close():
    world = small_world()
    scene = gen_scene(world, 8, 8, 5, active=range(6), seed=14)
    sample = annotate(world, scene, "WD", teacher_sigma=0.05, seed=6)
    for (box, label), teacher in zip(scene.regions, sample.payload.teachers):
        assert np.linalg.norm(teacher) == pytest.approx(1.0, abs=1e-9)
        assert teacher @ world.space.E[label] > 0.9


def test_annotate_rejects_unknown_tier():
    world = small_world()
    scene = gen_scene(world, 4, 4, 2, active=[0, 1], seed=15)
    with pytest.raises(ValueError):
        annotate(world, scene, "XX")


# -- batching ---------------------------------------------------------------------


def fake_pool(dataset_id: int, n: int) -> list[AnnotatedSample]:
    return [
        AnnotatedSample(
            np.zeros((1, 1, 1)),
            np.zeros((1, 1), dtype=np.int64),
            "HD",
            PixelSupervision(np.zeros((1, 1), dtype=np.int64)),
            dataset_id,
        )
        for _ in range(n)
    ]


def test_balanced_even_split():
    pools = [fake_pool(0, 5), fake_pool(1, 5), fake_pool(2, 5)]
    stream = balanced_batches(pools, 6, seed=1)
    for _ in range(4):
        batch = next(stream)
        ids = [s.dataset_id for s in batch]
        assert len(batch) == 6
        assert all(ids.count(d) == 2 for d in range(3))


def test_balanced_remainder_rotates():
    pools = [fake_pool(0, 8), fake_pool(1, 8), fake_pool(2, 8)]
    stream = balanced_batches(pools, 4, seed=2)
    seen = []
    for _ in range(6):
        counts = [0, 0, 0]
        for s in next(stream):
            counts[s.dataset_id] += 1
        assert sorted(counts) == [1, 1, 2]
        seen.append(int(np.argmax(counts)))
    assert set(seen) == {0, 1, 2}  # extra sample visits every dataset


def test_balanced_without_replacement_per_epoch():
    pools = [fake_pool(0, 6)]
    tagged = [
        AnnotatedSample(np.full((1, 1, 1), float(i)), s.truth, s.tier, s.payload, 0)
        for i, s in enumerate(pools[0])
    ]
    stream = balanced_batches([tagged], 2, seed=3)
    epoch = [s.features[0, 0, 0] for _ in range(3) for s in next(stream)]
    assert sorted(epoch) == list(map(float, range(6)))


def test_balanced_deterministic():
    pools = [fake_pool(0, 4), fake_pool(1, 4)]

    def record():
        stream = balanced_batches(pools, 3, seed=4)
        return [[id(s) for s in next(stream)] for _ in range(5)]

    assert record() == record()


def test_balanced_validates():
    with pytest.raises(ValueError):
        next(balanced_batches([], 4, seed=0))
    with pytest.raises(ValueError):
        next(balanced_batches([fake_pool(0, 2), []], 4, seed=0))
    with pytest.raises(ValueError):
        next(balanced_batches([fake_pool(0, 2)] * 5, 4, seed=0))


# -- archives ---------------------------------------------------------------------


def test_pgm_roundtrip_with_ignore(tmp_path):
    ids = np.array([[-1, 0, 7], [300, 2, -1]])
    path = tmp_path / "m.pgm"
    write_pgm(path, ids)
    assert np.array_equal(read_pgm(path), ids)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n")
    # ignore encodes as 0, ids shift by one, big-endian 16-bit
    assert raw[-12:-10] == (0).to_bytes(2, "big")


def test_archive_roundtrip(tmp_path):
    world = small_world()
    samples = []
    for i, tier in enumerate(("HD", "LD", "WD")):
        scene = gen_scene(world, 6, 5, 4, active=range(6), seed=20 + i)
        samples.append(
            annotate(world, scene, tier, corrupt_frac=0.2, teacher_sigma=0.05, seed=i, dataset_id=i)
        )
    save_samples(tmp_path / "arc", samples)
    back = load_samples(tmp_path / "arc")
    assert len(back) == 3
    for orig, got in zip(samples, back):
        assert got.tier == orig.tier
        assert got.dataset_id == orig.dataset_id
        assert np.array_equal(got.features, orig.features)
        assert np.array_equal(got.truth, orig.truth)
        if isinstance(orig.payload, PixelSupervision):
            assert np.array_equal(got.payload.labels, orig.payload.labels)
        else:
            assert got.payload.boxes == orig.payload.boxes
            for a, b in zip(got.payload.teachers, orig.payload.teachers):
                assert np.array_equal(a, b)
