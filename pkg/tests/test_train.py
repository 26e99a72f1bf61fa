"""Optimizer behavior, training determinism, checkpoint round trips and
thresholded prediction."""

import numpy as np
import pytest

from diffnet.data import SceneParams, generate_scene
from diffnet.errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    NonFiniteLossError,
)
from diffnet.model import ModelConfig, init_model
from diffnet.tensor import Tensor
from diffnet.train import (
    AdamState,
    TrainConfig,
    adam_step,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    predict,
    restore_model,
    save_checkpoint,
    train,
)

TINY = ModelConfig(in_channels=2, base_width=4)


def tiny_tiles(n=4, seed0=0, size=(32, 32)):
    params = SceneParams(channels=2, size=size, burn_fraction_target=0.15)
    return [generate_scene(params, seed=seed0 + i) for i in range(n)]


class TestAdam:
    def test_first_step_approximates_signed_lr(self):
        p = Tensor(np.zeros(4, np.float64), requires_grad=True)
        g = np.array([0.5, -2.0, 1e3, -1e-2])
        state = AdamState.for_params([p])
        cfg = TrainConfig(lr=1e-3)
        adam_step([p], [g], state, cfg)
        np.testing.assert_allclose(p.data, -1e-3 * np.sign(g), rtol=1e-3)

    def test_zero_grad_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0], np.float64), requires_grad=True)
        state = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], state, TrainConfig())
        np.testing.assert_allclose(p.data, [1.0, -2.0], atol=1e-12)

    def test_scalar_quadratic_matches_reference_trajectory(self):
        """Five steps on f(x) = 0.5 x^2 against an inline scalar Adam."""
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8

        x_ref, m_ref, v_ref = 2.0, 0.0, 0.0
        reference = []
        for t in range(1, 6):
            g = x_ref
            m_ref = b1 * m_ref + (1 - b1) * g
            v_ref = b2 * v_ref + (1 - b2) * g * g
            x_ref -= lr * (m_ref / (1 - b1**t)) / (np.sqrt(v_ref / (1 - b2**t)) + eps)
            reference.append(x_ref)

        p = Tensor(np.array([2.0]), requires_grad=True)
        state = AdamState.for_params([p])
        cfg = TrainConfig(lr=lr, betas=(b1, b2), adam_eps=eps)
        trajectory = []
        for _ in range(5):
            adam_step([p], [p.data.copy()], state, cfg)
            trajectory.append(float(p.data[0]))
        np.testing.assert_allclose(trajectory, reference, atol=1e-10)

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState.for_params([p])
        with pytest.raises(ContractError):
            adam_step([p], [np.zeros(4)], state, TrainConfig())

    def test_length_mismatch_rejected(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = AdamState.for_params([p])
        with pytest.raises(ContractError):
            adam_step([p], [], state, TrainConfig())


class TestTrainLoop:
    def test_deterministic_logs(self):
        cfg = TrainConfig(steps=5, batch_size=2, patch_size=32, seed=3, log_every=1)
        runs = []
        for _ in range(2):
            model = init_model(TINY, seed=1)
            _, log = train(model, tiny_tiles(), cfg)
            runs.append([(r.step, r.loss, r.bce, r.dice) for r in log.records])
        assert runs[0] == runs[1]

    def test_log_steps_strictly_increase(self):
        model = init_model(TINY, seed=1)
        cfg = TrainConfig(steps=23, batch_size=2, patch_size=32, seed=0, log_every=7)
        _, log = train(model, tiny_tiles(), cfg)
        steps = [r.step for r in log.records]
        assert steps == sorted(set(steps))
        assert steps[0] == 1 and steps[-1] == 23

    def test_zero_steps_returns_initial_model(self):
        model = init_model(TINY, seed=1)
        before = {n: t.data.copy() for n, t in model.parameter_list()}
        ckpt, log = train(model, tiny_tiles(), TrainConfig(steps=0, patch_size=32))
        assert not log.records
        for name, arr in ckpt.params.items():
            assert np.array_equal(arr, before[name])

    def test_loss_decreases(self):
        model = init_model(TINY, seed=1)
        cfg = TrainConfig(steps=40, batch_size=2, patch_size=32, seed=0, log_every=40)
        _, log = train(model, tiny_tiles(), cfg)
        assert log.records[-1].loss < log.records[0].loss

    def test_non_finite_loss_aborts_with_step(self):
        model = init_model(TINY, seed=1)
        model.params["enc1.conv.weight"].data[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError) as exc:
            train(model, tiny_tiles(), TrainConfig(steps=3, patch_size=32))
        assert exc.value.step == 1

    def test_encoder_gradients_flow_through_both_branches(self):
        """After one backward on a burned batch, every encoder parameter
        must receive gradient (weight sharing feeds both branches).

        Needs a spatial extent where the two branches' ReLU masks and pool
        argmaxes differ; on degenerate 1x1 bottleneck maps a shared bias
        shift cancels exactly in the feature difference.
        """
        from diffnet.losses import LossConfig, hybrid_loss

        model = init_model(TINY, seed=1)
        tile = tiny_tiles(1, size=(64, 64))[0]
        assert (tile.mask == 1).any()
        probs = model.forward(
            Tensor(tile.pre[None]), Tensor(tile.post[None]), mode="train"
        )
        hybrid_loss(probs, tile.mask[None, None], LossConfig()).backward()
        for name, t in model.parameter_list():
            if name.startswith("enc"):
                assert np.linalg.norm(t.grad) > 0.0, name

    def test_empty_tile_list_rejected(self):
        with pytest.raises(ContractError):
            train(init_model(TINY, seed=1), [], TrainConfig(steps=1))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=-1.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(patch_size=33).validate()


class TestCheckpoint:
    def test_save_load_predict_bitwise(self, tmp_path):
        model = init_model(TINY, seed=2)
        tiles = tiny_tiles()
        train(model, tiles, TrainConfig(steps=5, batch_size=2, patch_size=32, seed=0))
        before = predict(model, tiles[0])

        path = tmp_path / "model.sunc"
        save_checkpoint(checkpoint_from_model(model, step=5), path)
        restored = model_from_checkpoint(load_checkpoint(path))
        after = predict(restored, tiles[0])
        assert np.array_equal(before, after)

    def test_round_trip_preserves_tensors_and_step(self, tmp_path):
        model = init_model(TINY, seed=2)
        ckpt = checkpoint_from_model(model, step=17, rng=np.random.default_rng(5))
        path = tmp_path / "model.sunc"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.step == 17
        assert back.config == TINY
        assert back.rng_words == ckpt.rng_words
        assert set(back.params) == set(ckpt.params)
        for name, arr in ckpt.params.items():
            assert np.array_equal(arr, back.params[name])
        for name, arr in ckpt.buffers.items():
            assert np.array_equal(arr, back.buffers[name])

    def test_parameter_names_match_parameter_list(self, tmp_path):
        model = init_model(TINY, seed=0)
        ckpt = checkpoint_from_model(model)
        assert set(ckpt.params) == {n for n, _ in model.parameter_list()}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.sunc"
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        model = init_model(TINY, seed=0)
        path = tmp_path / "model.sunc"
        save_checkpoint(checkpoint_from_model(model), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_corrupted_length_field(self, tmp_path):
        model = init_model(TINY, seed=0)
        path = tmp_path / "model.sunc"
        save_checkpoint(checkpoint_from_model(model), path)
        blob = bytearray(path.read_bytes())
        blob[6:10] = (0xFFFFFFFF).to_bytes(4, "little")  # header length
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointFormatError, match="truncated"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = init_model(TINY, seed=0)
        path = tmp_path / "model.sunc"
        save_checkpoint(checkpoint_from_model(model), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_config_mismatch_is_error_not_reshape(self, tmp_path):
        model = init_model(TINY, seed=0)
        path = tmp_path / "model.sunc"
        save_checkpoint(checkpoint_from_model(model), path)
        other = init_model(ModelConfig(in_channels=3, base_width=4), seed=0)
        with pytest.raises(ConfigError):
            restore_model(other, load_checkpoint(path))


class TestPredict:
    def test_all_below_threshold_gives_zeros(self):
        model = init_model(TINY, seed=3)
        tile = tiny_tiles(1)[0]
        out = predict(model, tile, threshold=0.999)
        assert np.all(out == 0)

    def test_threshold_zero_gives_all_ones(self):
        model = init_model(TINY, seed=3)
        tile = tiny_tiles(1)[0]
        out = predict(model, tile, threshold=0.0)
        assert np.all(out == 1)

    def test_threshold_monotonicity(self):
        model = init_model(TINY, seed=3)
        tile = tiny_tiles(1)[0]
        low = int((predict(model, tile, threshold=0.3) == 1).sum())
        high = int((predict(model, tile, threshold=0.7) == 1).sum())
        assert high <= low

    def test_nodata_propagates(self):
        model = init_model(TINY, seed=3)
        tile = tiny_tiles(1)[0]
        tile.mask[:4, :4] = 255
        out = predict(model, tile)
        assert np.all(out[:4, :4] == 255)
        assert np.all(out[4:, 4:] != 255)

    def test_bad_dims_rejected(self):
        from diffnet.data import BitemporalTile
        from diffnet.errors import ShapeError

        model = init_model(TINY, seed=3)
        tile = BitemporalTile(
            pre=np.zeros((2, 48, 48), np.float32),
            post=np.zeros((2, 48, 48), np.float32),
            mask=np.zeros((48, 48), np.uint8),
        )
        with pytest.raises(ShapeError):
            predict(model, tile)
