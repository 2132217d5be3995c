import json

import numpy as np
import pytest

from vistok import tokenizers as tk
from vistok.optim import TrainConfig
from vistok.tensor import DimensionError, Tensor
from vistok.tokenizers import (
    DepthMap,
    MaskAugSpec,
    TokenizerConfig,
    TrainingDiverged,
    build_tokenizer,
    depth_default_config,
    interpolation_detokenize,
    interpolation_tokenize,
    mask_augment,
    mask_default_config,
    train_tokenizer,
)


def tiny_config(**overrides):
    base = dict(
        n_conv_layers=2,
        channel_schedule=(8, 8),
        n_resblocks=1,
        codebook_size=16,
        code_dim=8,
    )
    base.update(overrides)
    return TokenizerConfig(**base)


class TestBuild:
    def test_depth_default_grid(self):
        model = build_tokenizer(depth_default_config(), np.random.default_rng(0))
        grid = model.tokenize(np.zeros((64, 64), dtype=np.float32))
        assert grid.shape == (2, 2)  # 64 / 32

    def test_mask_default_grid(self):
        model = build_tokenizer(mask_default_config(), np.random.default_rng(0))
        grid = model.tokenize(np.zeros((64, 64), dtype=np.float32))
        assert grid.shape == (4, 4)

    def test_depth_parameter_count(self):
        model = build_tokenizer(depth_default_config(), np.random.default_rng(0))
        assert 1_000_000 <= model.n_parameters() <= 4_000_000

    def test_schedule_length_mismatch(self):
        with pytest.raises(ValueError, match="schedule"):
            TokenizerConfig(n_conv_layers=3, channel_schedule=(8, 8))

    def test_ablation_grid_shapes(self):
        schedules = {8: (16, 32, 64), 16: (16, 32, 64, 128), 32: (16, 32, 64, 128, 256)}
        x = np.random.default_rng(1).random((64, 64)).astype(np.float32)
        for ratio, schedule in schedules.items():
            for k in (64, 128, 256):
                for width in (0.5, 1.0, 2.0):
                    cfg = TokenizerConfig(
                        n_conv_layers=len(schedule),
                        channel_schedule=schedule,
                        codebook_size=k,
                        width_multiplier=width,
                    )
                    assert cfg.downsample_ratio == ratio
                    model = build_tokenizer(cfg, np.random.default_rng(0))
                    grid = model.tokenize(x)
                    assert grid.shape == (64 // ratio, 64 // ratio)
                    assert grid.max() < k
                    recon = model.detokenize(grid)
                    assert recon.shape == (64, 64)


@pytest.fixture(scope="module")
def model():
    return build_tokenizer(mask_default_config(), np.random.default_rng(3))


class TestTokenizeDetokenize:
    def test_deterministic(self, model):
        x = np.zeros((64, 64), dtype=np.float32)
        assert np.array_equal(model.tokenize(x), model.tokenize(x))

    def test_indices_in_range(self, model):
        x = np.random.default_rng(4).random((64, 64)).astype(np.float32)
        grid = model.tokenize(x)
        assert grid.min() >= 0
        assert grid.max() < model.config.codebook_size

    def test_indivisible_input_rejected(self, model):
        with pytest.raises(DimensionError, match="divisible"):
            model.tokenize(np.zeros((60, 60), dtype=np.float32))

    def test_hard_equals_one_hot_soft(self, model):
        rng = np.random.default_rng(5)
        grid = rng.integers(0, model.config.codebook_size, size=(4, 4))
        hard = model.detokenize(grid)
        onehot = np.zeros((4, 4, model.config.codebook_size), dtype=np.float32)
        for r in range(4):
            for c in range(4):
                onehot[r, c, grid[r, c]] = 1.0
        soft = model.detokenize_soft(onehot)
        assert np.array_equal(hard, soft)

    def test_out_of_range_token_rejected(self, model):
        grid = np.full((4, 4), model.config.codebook_size, dtype=np.int64)
        with pytest.raises(IndexError):
            model.detokenize(grid)

    def test_bad_soft_shape_rejected(self, model):
        with pytest.raises(DimensionError):
            model.detokenize_soft(np.ones((4, 4, 7), dtype=np.float32))

    def test_depth_map_accepted_and_denormalized(self):
        model = build_tokenizer(
            depth_default_config(n_conv_layers=4, channel_schedule=(16, 32, 64, 128)),
            np.random.default_rng(6),
        )
        dm = DepthMap(values=np.full((64, 64), 5.0), valid=np.ones((64, 64), dtype=bool))
        recon = model.detokenize(model.tokenize(dm))
        assert recon.shape == (64, 64)
        assert recon.min() >= 0.0
        assert recon.max() <= 10.0


class TestMaskAugment:
    def test_ratio_zero_identity(self):
        x = np.random.default_rng(7).random((64, 64)).astype(np.float32)
        corrupted, target, loss_mask = mask_augment(x, MaskAugSpec(0.0), np.random.default_rng(0))
        assert np.array_equal(corrupted, x)
        assert np.array_equal(target, x)
        assert loss_mask.all()

    def test_ratio_one_fills_everything(self):
        x = np.ones((64, 64), dtype=np.float32)
        corrupted, _, _ = mask_augment(x, MaskAugSpec(1.0, 16), np.random.default_rng(1))
        assert np.all(corrupted == 0.0)

    def test_exact_patch_count(self):
        x = np.ones((64, 64), dtype=np.float32)
        spec = MaskAugSpec(0.5, 16)
        corrupted, _, _ = mask_augment(x, spec, np.random.default_rng(2))
        filled = corrupted.reshape(4, 16, 4, 16).mean(axis=(1, 3))
        assert (filled == 0.0).sum() == 8
        assert (filled == 1.0).sum() == 8

    def test_rounding_rule(self):
        x = np.ones((64, 64), dtype=np.float32)
        corrupted, _, _ = mask_augment(x, MaskAugSpec(0.3, 16), np.random.default_rng(3))
        filled = (corrupted.reshape(4, 16, 4, 16).mean(axis=(1, 3)) == 0).sum()
        assert filled == round(0.3 * 16)

    def test_supervision_untouched_and_validity_forwarded(self):
        rng = np.random.default_rng(8)
        x = rng.random((64, 64)).astype(np.float32)
        valid = rng.random((64, 64)) > 0.2
        corrupted, target, loss_mask = mask_augment(
            x, MaskAugSpec(0.5, 16, fill_value=-1.0), np.random.default_rng(4), valid
        )
        assert np.array_equal(target, x)
        assert np.array_equal(loss_mask, valid)
        assert (corrupted == -1.0).any()

    def test_batch_patches_differ_per_sample(self):
        x = np.ones((4, 64, 64), dtype=np.float32)
        corrupted, _, _ = mask_augment(x, MaskAugSpec(0.5, 16), np.random.default_rng(5))
        patterns = {corrupted[i].tobytes() for i in range(4)}
        assert len(patterns) > 1

    def test_indivisible_patch_rejected(self):
        with pytest.raises(DimensionError):
            mask_augment(np.ones((60, 60)), MaskAugSpec(0.5, 16), np.random.default_rng(0))


class TestTraining:
    def make_data(self, n=24, size=16, seed=0):
        rng = np.random.default_rng(seed)
        base = rng.random((n, 1, 1)).astype(np.float32)
        ramp = np.linspace(0, 1, size, dtype=np.float32)
        values = np.clip(base + 0.3 * ramp[None, :, None] + 0.2 * ramp[None, None, :], 0, 1)
        return values, np.ones_like(values, dtype=bool)

    def test_trains_and_logs(self, tmp_path):
        values, valid = self.make_data()
        log = tmp_path / "log.jsonl"
        model, history = train_tokenizer(
            (values, valid), tiny_config(), TrainConfig(epochs=3, batch_size=8, seed=1),
            log_path=log,
        )
        assert len(history) == 3
        assert all(np.isfinite(h["loss"]) for h in history)
        rows = [json.loads(line) for line in log.read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1, 2]
        assert set(rows[0]) == {"epoch", "loss", "recon_metric", "lr"}

    def test_loss_decreases(self):
        values, valid = self.make_data(n=48)
        _, history = train_tokenizer(
            (values, valid), tiny_config(), TrainConfig(epochs=8, batch_size=16, seed=2),
        )
        assert history[-1]["loss"] < history[0]["loss"]

    def test_bit_deterministic(self):
        values, valid = self.make_data()
        cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
        m1, h1 = train_tokenizer((values, valid), tiny_config(), cfg)
        m2, h2 = train_tokenizer((values, valid), tiny_config(), cfg)
        assert h1 == h2
        for (n1, t1), (n2, t2) in zip(m1.named_state(), m2.named_state()):
            assert n1 == n2
            assert np.array_equal(t1, t2)

    def test_seed_changes_run(self):
        values, valid = self.make_data()
        _, h1 = train_tokenizer((values, valid), tiny_config(),
                                TrainConfig(epochs=2, batch_size=8, seed=4))
        _, h2 = train_tokenizer((values, valid), tiny_config(),
                                TrainConfig(epochs=2, batch_size=8, seed=5))
        assert h1 != h2

    def test_nan_on_valid_pixel_aborts(self):
        values, valid = self.make_data()
        values = values.copy()
        values[0, 0, 0] = np.nan  # valid pixel, so it must blow up the loss
        with pytest.raises(TrainingDiverged, match="epoch"):
            train_tokenizer((values, valid), tiny_config(),
                            TrainConfig(epochs=1, batch_size=32, seed=6))

    def test_invalid_pixels_never_influence_training(self):
        values, valid = self.make_data(n=8)
        valid = valid.copy()
        valid[:, :4] = False
        clean = values.copy()
        clean[:, :4] = 0.0
        poisoned = values.copy()
        poisoned[:, :4] = np.nan  # worst-case garbage where valid is False
        cfg = TrainConfig(epochs=2, batch_size=8, seed=7)
        m1, h1 = train_tokenizer((clean, valid), tiny_config(), cfg)
        m2, h2 = train_tokenizer((poisoned, valid), tiny_config(), cfg)
        assert h1 == h2
        for (_, t1), (_, t2) in zip(m1.named_state(), m2.named_state()):
            assert np.array_equal(t1, t2)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            train_tokenizer((np.zeros((0, 16, 16)), np.zeros((0, 16, 16), dtype=bool)),
                            tiny_config(), TrainConfig(epochs=1))


class TestInterpolationBaseline:
    def test_constant_depth_roundtrip(self):
        x = np.full((64, 64), 5.0, dtype=np.float32)
        grid = interpolation_tokenize(x, 16, "bilinear", n_bins=128, value_range=(0, 10))
        back = interpolation_detokenize(grid, 16, "bilinear", n_bins=128, value_range=(0, 10))
        assert np.max(np.abs(back - 5.0)) <= 10 / 128 / 2

    def test_block_aligned_mask_is_exact(self):
        mask = np.zeros((64, 64), dtype=np.float32)
        mask[16:48, 16:48] = 1.0
        grid = interpolation_tokenize(mask, 16, "nearest")
        back = interpolation_detokenize(grid, 16, "nearest")
        assert np.array_equal(back, mask)

    def test_checkerboard_destroyed(self):
        mask = np.indices((64, 64)).sum(axis=0) % 2 == 0
        grid = interpolation_tokenize(mask.astype(np.float32), 16, "nearest")
        back = interpolation_detokenize(grid, 16, "nearest") >= 0.5
        inter = np.logical_and(back, mask).sum()
        union = np.logical_or(back, mask).sum()
        assert inter / union < 0.6  # single-pixel detail cannot survive 16x

    def test_bad_bins_rejected(self):
        with pytest.raises(ValueError):
            interpolation_tokenize(np.zeros((64, 64)), 16, "bilinear", n_bins=1)

    def test_grid_shape(self):
        grid = interpolation_tokenize(np.zeros((64, 64)), 16, "bilinear", n_bins=8)
        assert grid.shape == (4, 4)
        assert grid.dtype == np.int64
