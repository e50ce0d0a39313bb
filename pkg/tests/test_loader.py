"""Loader contracts: plan determinism, ordering, coverage, worker invariance."""

import hashlib

import numpy as np
import pytest

from viewforge.augment import GaussianNoise, Grayscale, HorizontalFlip, RandomResizedCrop
from viewforge.container import pack_dataset
from viewforge.dump import read_batches, write_batches
from viewforge.errors import SampleReadError
from viewforge.loader import (
    InstanceViews,
    LoaderConfig,
    MultiViewLoader,
    ResolutionSchedule,
    Traversal,
    bench_throughput,
    build_epoch_plan,
    resolution_at,
)
from viewforge.toydata import make_random_images

PIPES = (
    (RandomResizedCrop(out_size=16, scale=(0.3, 1.0)), HorizontalFlip(p=0.5)),
    (RandomResizedCrop(out_size=16, scale=(0.3, 1.0)), GaussianNoise(std=0.05)),
)


def _config(**kw):
    defaults = dict(
        batch_size=16,
        view_pipelines=PIPES,
        num_workers=0,
        traversal=Traversal.RANDOM,
        seed=3,
        drop_last=False,
        prefetch_depth=2,
    )
    defaults.update(kw)
    return LoaderConfig(**defaults)


def _stream_hash(path, config, epochs=1):
    h = hashlib.sha256()
    with MultiViewLoader(path, config) as loader:
        for epoch in range(epochs):
            for batch in loader.iter_epoch(epoch):
                for view in batch.views:
                    h.update(view.tobytes())
                h.update(batch.labels.tobytes())
    return h.hexdigest()


# -- epoch plans -----------------------------------------------------------

def test_plan_sequential_identity():
    assert np.array_equal(build_epoch_plan(5, Traversal.SEQUENTIAL, 0, 0), [0, 1, 2, 3, 4])


def test_plan_random_deterministic_and_epoch_dependent():
    a = build_epoch_plan(100, Traversal.RANDOM, 7, 3)
    b = build_epoch_plan(100, Traversal.RANDOM, 7, 3)
    c = build_epoch_plan(100, Traversal.RANDOM, 7, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(a) == list(range(100))


def test_plan_quasi_random_group_membership():
    plan = build_epoch_plan(1000, Traversal.QUASI_RANDOM, 11, 0, group_size=100)
    assert sorted(plan) == list(range(1000))
    # every contiguous output block of 100 holds exactly one source group
    for block in range(10):
        chunk = plan[block * 100 : (block + 1) * 100]
        groups = set(int(i) // 100 for i in chunk)
        assert len(groups) == 1


# -- resolution schedule ------------------------------------------------------

def test_resolution_midpoint():
    sched = ResolutionSchedule(start_res=160, end_res=224, start_epoch=0, end_epoch=10)
    assert resolution_at(sched, 5) == 192


def test_resolution_clamps_outside_ramp():
    sched = ResolutionSchedule(start_res=160, end_res=224, start_epoch=2, end_epoch=10)
    assert resolution_at(sched, 0) == 160
    assert resolution_at(sched, 99) == 224


def test_resolution_quarter_point_rounds_down_to_multiple_of_32():
    sched = ResolutionSchedule(start_res=160, end_res=224, start_epoch=0, end_epoch=4)
    # raw value at epoch 1 is 176 -> floor to 160
    assert resolution_at(sched, 1) == 160


def test_resolution_applies_to_crop_stages(tmp_path):
    path = tmp_path / "res.sslp"
    pack_dataset(make_random_images(40, 48, 48, seed=2), path)
    sched = ResolutionSchedule(start_res=8, end_res=16, start_epoch=0, end_epoch=2)
    config = _config(batch_size=8)
    with MultiViewLoader(path, config, schedule=sched) as loader:
        first = next(iter(loader.iter_epoch(0)))
        last = next(iter(loader.iter_epoch(2)))
    assert first.views[0].shape[1:3] == (8, 8)
    assert last.views[0].shape[1:3] == (16, 16)


# -- batching ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def packed(tmp_path_factory):
    path = tmp_path_factory.mktemp("loader") / "loader.sslp"
    records = make_random_images(100, 32, 32, seed=1)
    pack_dataset(records, path)
    return path, records


def test_drop_last_batch_counts(packed):
    path, _ = packed
    # 100 samples, batch 16: 6 full batches + 1 partial
    with MultiViewLoader(path, _config(drop_last=True)) as loader:
        assert sum(1 for _ in loader.iter_epoch(0)) == 6
    with MultiViewLoader(path, _config(drop_last=False)) as loader:
        batches = list(loader.iter_epoch(0))
    assert len(batches) == 7
    assert batches[-1].labels.shape[0] == 4


def test_epoch_coverage_every_sample_once(packed):
    path, _ = packed
    with MultiViewLoader(path, _config(drop_last=False)) as loader:
        seen = np.concatenate([b.sample_indices for b in loader.iter_epoch(1)])
    assert sorted(seen.tolist()) == list(range(100))


def test_view_alignment_rows_trace_to_same_sample(packed):
    path, records = packed
    # identity-crop pipelines make the views equal to the source pixels
    ident = (
        (RandomResizedCrop(out_size=32, scale=(1.0, 1.0), ratio=(1.0, 1.0)),),
        (RandomResizedCrop(out_size=32, scale=(1.0, 1.0), ratio=(1.0, 1.0)),),
    )
    config = _config(view_pipelines=ident, batch_size=10)
    with MultiViewLoader(path, config) as loader:
        for batch in loader.iter_epoch(0):
            for row, sample_index in enumerate(batch.sample_indices):
                src = records[int(sample_index)]
                assert np.array_equal(batch.views[0][row], src.pixels)
                assert np.array_equal(batch.views[1][row], src.pixels)
                assert batch.labels[row] == src.label
            break


def test_worker_invariance_small(packed):
    path, _ = packed
    hashes = {
        w: _stream_hash(path, _config(num_workers=w, prefetch_depth=3))
        for w in (0, 1, 2)
    }
    assert len(set(hashes.values())) == 1


def test_prefetch_depth_invariance(packed):
    path, _ = packed
    a = _stream_hash(path, _config(num_workers=2, prefetch_depth=1))
    b = _stream_hash(path, _config(num_workers=2, prefetch_depth=8))
    assert a == b


def test_distinct_pipelines_make_distinct_views(packed):
    path, _ = packed
    config = _config(
        view_pipelines=(
            (RandomResizedCrop(out_size=16, scale=(0.3, 0.8)),),
            (Grayscale(p=1.0), RandomResizedCrop(out_size=16, scale=(0.3, 0.8))),
        )
    )
    with MultiViewLoader(path, config) as loader:
        batch = next(iter(loader.iter_epoch(0)))
    assert not np.array_equal(batch.views[0], batch.views[1])


def test_read_errors_carry_sample_index(tmp_path):
    path = tmp_path / "bad.sslp"
    records = make_random_images(10, 8, 8, seed=3)
    pack_dataset(records, path)
    # corrupt sample 6's payload
    from viewforge.container import open_dataset

    with open_dataset(path) as handle:
        target = int(handle.descriptor(6)["byte_offset"])
    blob = bytearray(path.read_bytes())
    blob[target] ^= 0x55
    path.write_bytes(blob)

    config = _config(batch_size=5, traversal=Traversal.SEQUENTIAL, num_workers=0)
    with MultiViewLoader(path, config) as loader:
        with pytest.raises(SampleReadError) as err:
            list(loader.iter_epoch(0))
    assert err.value.sample_index == 6
    assert "CorruptSample" in str(err.value)


def test_read_errors_survive_worker_boundary(tmp_path):
    path = tmp_path / "bad2.sslp"
    pack_dataset(make_random_images(10, 8, 8, seed=4), path)
    from viewforge.container import open_dataset

    with open_dataset(path) as handle:
        target = int(handle.descriptor(3)["byte_offset"])
    blob = bytearray(path.read_bytes())
    blob[target] ^= 0x55
    path.write_bytes(blob)

    config = _config(batch_size=5, traversal=Traversal.SEQUENTIAL, num_workers=2)
    with MultiViewLoader(path, config) as loader:
        with pytest.raises(SampleReadError) as err:
            list(loader.iter_epoch(0))
    assert err.value.sample_index == 3


# -- instance view mode --------------------------------------------------------------

def test_quasi_group_size_defaults_to_one_mebibyte_of_samples(packed):
    path, _ = packed
    with MultiViewLoader(path, _config(traversal=Traversal.QUASI_RANDOM)) as loader:
        # 32x32x3 RAW payloads are 3072 bytes; 1 MiB / 3072 = 341 samples
        assert loader._quasi_group == round((1 << 20) / 3072)


def test_instance_mode_three_views(packed):
    path, _ = packed
    config = _config(
        view_pipelines=(),
        instance=InstanceViews(noise_std=0.1, patch_scale=(0.05, 0.2), out_size=16),
        batch_size=8,
    )
    with MultiViewLoader(path, config) as loader:
        batch = next(iter(loader.iter_epoch(0)))
    assert len(batch.views) == 3
    assert batch.views[0].shape == (8, 16, 16, 3)
    # positives differ only by noise; the patch is a different crop entirely
    assert not np.array_equal(batch.views[0], batch.views[1])
    a = batch.views[0].astype(np.int16)
    b = batch.views[1].astype(np.int16)
    assert np.abs(a - b).mean() < 40


def test_instance_mode_worker_invariance(packed):
    path, _ = packed
    def cfg(w):
        return _config(
            view_pipelines=(),
            instance=InstanceViews(noise_std=0.1, patch_scale=(0.05, 0.2), out_size=16),
            batch_size=8,
            num_workers=w,
        )
    assert _stream_hash(path, cfg(0)) == _stream_hash(path, cfg(2))


# -- dump round trip ---------------------------------------------------------------------

def test_dump_round_trip(packed, tmp_path):
    path, _ = packed
    config = _config(batch_size=16)
    out = tmp_path / "batches.vfb"
    with MultiViewLoader(path, config) as loader:
        frames = write_batches(out, loader.iter_epoch(0))
    assert frames == 7
    replayed = list(read_batches(out))
    with MultiViewLoader(path, config) as loader:
        original = list(loader.iter_epoch(0))
    assert len(replayed) == len(original)
    for a, b in zip(replayed, original):
        assert a.epoch == b.epoch and a.batch_index == b.batch_index
        assert np.array_equal(a.labels, b.labels)
        for va, vb in zip(a.views, b.views):
            assert va.dtype == vb.dtype
            assert np.array_equal(va, vb)


# -- bench ----------------------------------------------------------------------------------

def test_bench_reports_counts_and_stages(packed):
    path, _ = packed
    report = bench_throughput(path, _config(num_workers=0), epochs=1, warmup=False)
    assert report.images == 100
    assert report.images_per_sec > 0
    assert set(report.stage_ms) == {"decode", "augment", "assemble"}
    payload = report.to_dict(include_timing=False)
    assert "images_per_sec" not in payload and "config" in payload


def test_bench_empty_pipeline_fastest(packed):
    path, _ = packed
    # a bare identity-resize pipeline must beat the full default recipe
    light = _config(view_pipelines=((RandomResizedCrop(out_size=16, scale=(0.9, 1.0)),),))
    from viewforge.augment import default_ssl_pipeline

    heavy = _config(view_pipelines=(tuple(default_ssl_pipeline(16)),))
    fast = bench_throughput(path, light, epochs=1, warmup=False)
    slow = bench_throughput(path, heavy, epochs=1, warmup=False)
    assert fast.images_per_sec > slow.images_per_sec
