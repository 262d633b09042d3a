"""Training loops: batching, divergence protection, metrics bookkeeping,
best-state selection, and end-to-end determinism of both trainers.

Runs here are deliberately tiny (small windows, few coordinates, a handful
of epochs); they check the machinery, not model quality.
"""

import math

import numpy as np
import pytest

from hiloseg.errors import DivergenceError
from hiloseg.models import HiLoConfig, HiLoModel, OnetConfig, OnetModel, train_hilo, train_superres_onet
from hiloseg.models.train import _chunk_bounds, _DivergenceGuard
from hiloseg.queue import MAX_HARDNESS, TrainingQueue
from hiloseg.sampling import SamplerConfig
from hiloseg.voxel import LabelVolume, VoxelVolume

ONET_CFG = OnetConfig(
    input_downsample=2,
    encoder_blocks=2,
    decoder_blocks=2,
    base_channels=4,
    latent_dim=16,
    decoder_hidden=8,
)

HILO_CFG = HiLoConfig(
    window_size=8,
    levels=2,
    encoder_blocks=2,
    cnn_decoder_blocks=2,
    onet_decoder_blocks=2,
    base_channels=2,
    decoder_hidden=8,
    batch_size=4,
)

SAMPLER = SamplerConfig(n_train_coords=128, n_hilo_coords=64)


def make_instance(dims, lo, hi, seed):
    """Noise volume with a bright labeled box at [lo, hi)."""
    rng = np.random.default_rng(seed)
    data = rng.random(dims, dtype=np.float32) * 0.2
    lab = np.zeros(dims, dtype=np.uint8)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    lab[box] = 1
    data[box] += 0.7
    return VoxelVolume(np.clip(data, 0.0, 1.0)), LabelVolume(lab)


def onet_dataset(n, seed0=0):
    out = []
    for k in range(n):
        off = 2 + (k % 3)
        out.append(make_instance((16, 16, 16), (off, off, off), (off + 7, off + 6, off + 8), seed0 + k))
    return out


def hilo_dataset(n, seed0=50):
    out = []
    for k in range(n):
        off = 3 + (k % 4)
        out.append(
            make_instance((24, 20, 22), (off, off, off), (off + 9, off + 8, off + 10), seed0 + k)
        )
    return out


class TestChunkBounds:
    @pytest.mark.parametrize("total,size", [(2, 2), (7, 3), (5, 2), (16, 4), (9, 8), (3, 100)])
    def test_contiguous_cover_with_no_trailing_singleton(self, total, size):
        bounds = _chunk_bounds(total, size)
        assert bounds[0][0] == 0
        assert bounds[-1][1] == total
        for (a, b), (c, _) in zip(bounds, bounds[1:]):
            assert b == c
        for a, b in bounds:
            assert b - a >= 2

    def test_trailing_singleton_merges(self):
        assert _chunk_bounds(7, 3) == [(0, 3), (3, 7)]

    def test_size_floor_is_two(self):
        assert _chunk_bounds(6, 1) == [(0, 2), (2, 4), (4, 6)]


class TestDivergenceGuard:
    def test_steady_losses_pass(self):
        guard = _DivergenceGuard()
        for _ in range(50):
            guard.check(0.7, "test")

    def test_non_finite_raises_immediately(self):
        guard = _DivergenceGuard()
        with pytest.raises(DivergenceError, match="non-finite"):
            guard.check(float("nan"), "test")

    def test_blowup_after_grace_raises(self):
        guard = _DivergenceGuard()
        for _ in range(10):
            guard.check(1.0, "test")
        with pytest.raises(DivergenceError, match="exceeds"):
            for _ in range(5):
                guard.check(100.0, "test")

    def test_spike_within_grace_tolerated(self):
        guard = _DivergenceGuard()
        guard.check(1.0, "test")
        guard.check(100.0, "test")  # warmup noise, not divergence


class TestTrainOnet:
    def test_zero_epochs_returns_initial_state(self):
        state, metrics = train_superres_onet(
            onet_dataset(2), ONET_CFG, SAMPLER, epochs=0, seed=3
        )
        fresh = OnetModel(ONET_CFG, seed=3).state_dict()
        assert state.keys() == fresh.keys()
        for k in state:
            np.testing.assert_array_equal(state[k], fresh[k])
        assert metrics["epochs"] == 0
        assert metrics["train_loss"] == []
        assert metrics["best_epoch"] is None

    def test_loss_decreases(self):
        _, metrics = train_superres_onet(
            onet_dataset(4), ONET_CFG, SAMPLER, epochs=6, batch=4, lr=0.01, seed=0
        )
        tl = metrics["train_loss"]
        assert len(tl) == 6
        assert np.mean(tl[-2:]) < tl[0]

    def test_validation_bookkeeping(self):
        _, metrics = train_superres_onet(
            onet_dataset(4), ONET_CFG, SAMPLER,
            epochs=5, batch=4, lr=0.01, val_dataset=onet_dataset(2, seed0=20), seed=1,
        )
        assert len(metrics["val_loss"]) == 5
        assert len(metrics["val_iou"]) == 5
        sm = metrics["val_iou_smoothed"]
        for i in range(5):
            assert sm[i] == pytest.approx(np.mean(metrics["val_iou"][max(0, i - 4) : i + 1]))
        assert metrics["best_epoch"] == int(np.argmax(sm))

    def test_deterministic_across_runs(self):
        kwargs = dict(epochs=2, batch=4, lr=0.01, seed=7)
        a, _ = train_superres_onet(onet_dataset(4), ONET_CFG, SAMPLER, **kwargs)
        b, _ = train_superres_onet(onet_dataset(4), ONET_CFG, SAMPLER, **kwargs)
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k], err_msg=k)

    def test_low_resolution_labels(self):
        cfg = OnetConfig(
            coord_resolution="low", input_downsample=2, encoder_blocks=2,
            decoder_blocks=2, base_channels=4, latent_dim=16, decoder_hidden=8,
        )
        _, metrics = train_superres_onet(
            onet_dataset(4), cfg, SAMPLER, epochs=4, batch=4, lr=0.01,
            val_dataset=onet_dataset(2, seed0=30), seed=2,
        )
        assert np.mean(metrics["train_loss"][-2:]) < metrics["train_loss"][0]
        assert len(metrics["val_iou"]) == 4

    def test_micro_batch_matches_full_batch(self):
        """Chunked accumulation is an implementation detail of the memory
        budget; the resulting parameters must not depend on it."""
        a, _ = train_superres_onet(
            onet_dataset(4), ONET_CFG, SAMPLER, epochs=2, batch=4, lr=0.01, seed=4
        )
        b, _ = train_superres_onet(
            onet_dataset(4), ONET_CFG, SAMPLER, epochs=2, batch=4, lr=0.01, seed=4,
            micro_batch=2,
        )
        for k in a:
            np.testing.assert_allclose(a[k], b[k], atol=1e-5, err_msg=k)

    def test_float64(self):
        state, _ = train_superres_onet(
            onet_dataset(2), ONET_CFG, SAMPLER, epochs=1, batch=2, seed=0, dtype=np.float64
        )
        assert all(v.dtype == np.float64 for v in state.values())

    def test_mismatched_dims_rejected(self):
        bad = onet_dataset(2) + [make_instance((16, 16, 8), (2, 2, 2), (6, 6, 6), 9)]
        with pytest.raises(ValueError, match="share dims"):
            train_superres_onet(bad, ONET_CFG, SAMPLER, epochs=1)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            train_superres_onet([], ONET_CFG, SAMPLER, epochs=1)

    def test_all_singleton_epoch_records_nan(self):
        _, metrics = train_superres_onet(
            onet_dataset(1), ONET_CFG, SAMPLER, epochs=1, batch=8, seed=0
        )
        assert math.isnan(metrics["train_loss"][0])

    def test_absurd_lr_raises(self):
        with pytest.raises(DivergenceError):
            train_superres_onet(
                onet_dataset(4), ONET_CFG, SAMPLER, epochs=30, batch=4, lr=1e4, seed=0
            )


class TestTrainHilo:
    def test_zero_epochs_returns_initial_state(self):
        queue = TrainingQueue(capacity=8)
        state, metrics = train_hilo(hilo_dataset(2), HILO_CFG, queue, epochs=0, seed=5)
        fresh = HiLoModel(HILO_CFG, seed=5).state_dict()
        for k in state:
            np.testing.assert_array_equal(state[k], fresh[k])
        assert metrics["steps"] == 0

    def test_loss_decreases_and_metrics_line_up(self):
        queue = TrainingQueue(capacity=8)
        _, metrics = train_hilo(
            hilo_dataset(4), HILO_CFG, queue, epochs=30, sampler=SAMPLER,
            val_dataset=hilo_dataset(2, seed0=80), lr=0.01, validate_every=10, seed=0,
        )
        tl = metrics["train_loss"]
        assert len(tl) == 30
        assert np.mean(tl[-3:]) < tl[0]
        assert metrics["val_steps"] == [10, 20, 30]
        assert len(metrics["val_iou"]) == 3
        sm = metrics["val_iou_smoothed"]
        assert metrics["best_step"] == metrics["val_steps"][int(np.argmax(sm))]
        # validation windows sit on the labeled object, so the all-empty
        # baseline scores zero overlap
        assert metrics["baseline_iou"] == 0.0

    def test_max_steps_caps_run(self):
        queue = TrainingQueue(capacity=8)
        _, metrics = train_hilo(
            hilo_dataset(4), HILO_CFG, queue, epochs=100, sampler=SAMPLER,
            max_steps=3, seed=0,
        )
        assert metrics["steps"] == 3
        assert len(metrics["train_loss"]) == 3

    def test_deterministic_across_runs(self):
        def run():
            queue = TrainingQueue(capacity=8, policy="hardness")
            return train_hilo(
                hilo_dataset(4), HILO_CFG, queue, epochs=8, sampler=SAMPLER,
                lr=0.01, seed=11,
            )[0]

        a, b = run(), run()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k], err_msg=k)

    def test_coordinate_decoder_variant(self):
        cfg = HiLoConfig(
            window_size=8, levels=2, decoder="onet", encoder_blocks=2,
            cnn_decoder_blocks=2, onet_decoder_blocks=2, base_channels=2,
            decoder_hidden=8, batch_size=4,
        )
        queue = TrainingQueue(capacity=8)
        _, metrics = train_hilo(
            hilo_dataset(4), cfg, queue, epochs=12, sampler=SAMPLER,
            val_dataset=hilo_dataset(1, seed0=90), lr=0.01, validate_every=6, seed=1,
        )
        assert np.mean(metrics["train_loss"][-3:]) < metrics["train_loss"][0]
        assert metrics["val_steps"] == [6, 12]

    def test_volume_mode_pyramid_sampling(self):
        queue = TrainingQueue(capacity=8)
        _, metrics = train_hilo(
            hilo_dataset(4), HILO_CFG, queue, epochs=4, sampler=SAMPLER,
            pyramid_sampling="volume", seed=2,
        )
        assert len(metrics["train_loss"]) == 4

    def test_bad_pyramid_sampling_mode(self):
        with pytest.raises(ValueError, match="pyramid_sampling"):
            train_hilo(hilo_dataset(2), HILO_CFG, TrainingQueue(capacity=8),
                       epochs=1, pyramid_sampling="grid")

    def test_training_updates_queue_hardness(self):
        queue = TrainingQueue(capacity=8, policy="hardness")
        train_hilo(hilo_dataset(4), HILO_CFG, queue, epochs=5, sampler=SAMPLER, seed=3)
        hard = [queue._entries[i].hardness for i in queue.instance_ids()]
        assert any(h < MAX_HARDNESS for h in hard)
        assert all(np.isfinite(h) for h in hard if h < MAX_HARDNESS)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            train_hilo([], HILO_CFG, TrainingQueue(capacity=8), epochs=1)

    def test_absurd_lr_raises(self):
        queue = TrainingQueue(capacity=8)
        with pytest.raises(DivergenceError):
            train_hilo(
                hilo_dataset(4), HILO_CFG, queue, epochs=40, sampler=SAMPLER,
                lr=1e4, seed=0,
            )
