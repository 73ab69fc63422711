"""Tests for the optimizer, warmup schedule, training loop and checkpoints."""

import itertools
import os
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from utils.config import LossConfig, PTCConfig, TrainConfig, substream
from utils.embedding_store import EmbeddingStore
from utils.encoders import FrozenEncoders
from utils.errors import (
    BadMagicError,
    DimensionMismatchError,
    InvalidInputError,
    NonFiniteGradientError,
    StoreError,
    TrainingAbortedError,
)
from utils.pcm import PARAM_NAMES, MappingParams, init_mapping
from utils.retrieval_eval import TemplateKind, evaluate
from utils.synth_world import make_eval_tasks
from utils.trainer import adamw_step, init_optimizer, load_checkpoint, lr_at_step, train


def _fast_config(**overrides):
    base = TrainConfig(learning_rate=3e-3, warmup_steps=5, batch_size=16, total_steps=12, seed=4, log_every=0)
    return replace(base, **overrides)


def _scalar_params(value=1.0):
    one = lambda: np.full((1, 1), value)  # noqa: E731
    vec = lambda: np.full(1, value)  # noqa: E731
    return MappingParams(one(), vec(), one(), vec(), one(), vec())


class TestSchedule:
    def test_endpoints(self):
        config = TrainConfig(learning_rate=1e-5, warmup_steps=100)
        assert lr_at_step(0, config) == 0.0
        assert lr_at_step(100, config) == 1e-5
        assert lr_at_step(50, config) == pytest.approx(5e-6, rel=1e-15)

    def test_monotone_then_constant(self):
        config = TrainConfig(learning_rate=2e-4, warmup_steps=10)
        rates = [lr_at_step(s, config) for s in range(30)]
        assert all(a <= b for a, b in zip(rates, rates[1:11]))
        assert len(set(rates[10:])) == 1

    def test_no_warmup(self):
        assert lr_at_step(0, TrainConfig(warmup_steps=0)) == TrainConfig().learning_rate

    def test_negative_step(self):
        with pytest.raises(InvalidInputError):
            lr_at_step(-1, TrainConfig())


class TestAdamW:
    def test_first_step_closed_form(self):
        params = _scalar_params(1.0)
        config = TrainConfig(weight_decay=0.0)
        state = init_optimizer(params, config)
        grads = {name: np.full_like(getattr(params, name), 2.0) for name in PARAM_NAMES}
        adamw_step(params, grads, state, 0.1, config)
        expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8))
        for name in PARAM_NAMES:
            assert getattr(params, name).item() == pytest.approx(expected, abs=1e-12)
        assert state.step == 1

    def test_pure_decay(self):
        params = _scalar_params(3.0)
        config = TrainConfig(weight_decay=0.1)
        state = init_optimizer(params, config)
        grads = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
        adamw_step(params, grads, state, 0.1, config)
        assert params.W1.item() == pytest.approx(3.0 * (1 - 0.01), rel=1e-14)

    def test_bumps_generation(self):
        params = _scalar_params()
        config = TrainConfig()
        state = init_optimizer(params, config)
        adamw_step(params, {n: np.ones_like(getattr(params, n)) for n in PARAM_NAMES}, state, 0.1, config)
        assert params.generation == 1

    def test_non_finite_gradient(self):
        params = _scalar_params()
        config = TrainConfig()
        grads = {n: np.ones_like(getattr(params, n)) for n in PARAM_NAMES}
        grads["b2"][0] = np.nan
        with pytest.raises(NonFiniteGradientError):
            adamw_step(params, grads, init_optimizer(params, config), 0.1, config)

    def test_shape_mismatch(self):
        params = _scalar_params()
        config = TrainConfig()
        grads = {n: np.ones_like(getattr(params, n)) for n in PARAM_NAMES}
        grads["W1"] = np.ones((2, 2))
        with pytest.raises(DimensionMismatchError):
            adamw_step(params, grads, init_optimizer(params, config), 0.1, config)


class TestTrain:
    def test_zero_steps_returns_initial_params(self, small_world):
        config = _fast_config(total_steps=0)
        result = train(small_world.store, small_world.encoders, config)
        initial = init_mapping(16, 16, substream(config.seed, "init"))
        np.testing.assert_array_equal(result.params.to_vector(), initial.to_vector())
        assert result.log == []

    def test_log_and_frozen_encoders(self, small_world, tmp_path):
        log_path = str(tmp_path / "log.jsonl")
        result = train(small_world.store, small_world.encoders, _fast_config(), log_path=log_path)
        assert len(result.log) == 12
        with open(log_path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert len(lines) == 12
        assert set(result.log[0]) == {"step", "l_compose", "l_align", "l_total", "grad_norm", "n_triplets", "skipped"}
        assert result.encoder_fingerprint_before == result.encoder_fingerprint_after

    def test_identical_runs_are_bitwise_identical(self, small_world, tmp_path):
        outputs = []
        for run in ("a", "b"):
            out = tmp_path / run
            result = train(small_world.store, small_world.encoders, _fast_config(),
                           log_path=str(out) + ".jsonl", checkpoint_dir=str(out))
            with open(os.path.join(out, "final.di2k"), "rb") as f:
                ckpt = f.read()
            with open(str(out) + ".jsonl", "rb") as f:
                outputs.append((ckpt, f.read(), result.params.to_vector()))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]
        np.testing.assert_array_equal(outputs[0][2], outputs[1][2])

    def test_resume_reproduces_trajectory(self, small_world, tmp_path):
        config = _fast_config(total_steps=10, checkpoint_every=4)
        full = train(small_world.store, small_world.encoders, config, checkpoint_dir=str(tmp_path / "full"))
        resumed = train(small_world.store, small_world.encoders, config,
                        resume_from=str(tmp_path / "full" / "step_000004.di2k"))
        np.testing.assert_array_equal(resumed.params.to_vector(), full.params.to_vector())
        assert resumed.log == full.log[4:]

    def test_resume_against_other_encoders_aborts(self, small_world, tmp_path):
        train(small_world.store, small_world.encoders, _fast_config(total_steps=2), checkpoint_dir=str(tmp_path))
        other = FrozenEncoders.build(replace(small_world.encoders.config, seed=9), small_world.encoders.vocab.words)
        with pytest.raises(TrainingAbortedError, match="different frozen encoders"):
            train(small_world.store, other, _fast_config(total_steps=4), resume_from=str(tmp_path / "final.di2k"))

    def test_encoders_touched_during_training_abort(self, small_world, monkeypatch):
        calls = itertools.count()
        monkeypatch.setattr(FrozenEncoders, "fingerprint", lambda self: f"fp{next(calls)}")
        with pytest.raises(TrainingAbortedError, match="changed during training"):
            train(small_world.store, small_world.encoders, _fast_config(total_steps=1))

    def test_resume_in_float32(self, small_world, tmp_path):
        train(small_world.store, small_world.encoders, _fast_config(total_steps=2), checkpoint_dir=str(tmp_path))
        result = train(small_world.store, small_world.encoders, _fast_config(total_steps=3, precision="float32"),
                       resume_from=str(tmp_path / "final.di2k"))
        assert result.params.W1.dtype == np.float32
        assert result.state.m["W1"].dtype == np.float32
        assert result.steps_run == 1

    def test_float32_mode(self, small_world):
        result = train(small_world.store, small_world.encoders, _fast_config(total_steps=3, precision="float32"))
        assert result.params.W1.dtype == np.float32

    def test_empty_store(self, small_world):
        with pytest.raises(StoreError):
            train(EmbeddingStore(16, []), small_world.encoders, _fast_config())

    def test_store_smaller_than_batch(self, small_world):
        with pytest.raises(InvalidInputError):
            train(small_world.store, small_world.encoders, _fast_config(batch_size=1000))

    def test_persistently_empty_batches_abort(self, small_world):
        # with two items at most one index can sit strictly below the batch mean
        config = _fast_config(batch_size=2, total_steps=20, max_skipped_steps=3)
        with pytest.raises(TrainingAbortedError):
            train(small_world.store, small_world.encoders, config)

    def test_bad_checkpoint_magic(self, tmp_path):
        path = tmp_path / "bad.di2k"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(BadMagicError):
            load_checkpoint(str(path))

    def test_checkpoint_round_trip(self, small_world, tmp_path):
        result = train(small_world.store, small_world.encoders, _fast_config(total_steps=3),
                       checkpoint_dir=str(tmp_path))
        ckpt = load_checkpoint(result.checkpoints[-1])
        assert ckpt.step == 3
        assert ckpt.state.step == result.state.step
        np.testing.assert_array_equal(ckpt.params.to_vector(), result.params.to_vector())
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(ckpt.state.v[name], result.state.v[name])


@pytest.mark.slow
def test_loss_goes_down(small_world):
    config = _fast_config(total_steps=200, warmup_steps=20, ptc=PTCConfig())
    result = train(small_world.store, small_world.encoders, config)
    losses = [e["l_total"] for e in result.log if not e["skipped"]]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


@pytest.mark.slow
def test_compose_loss_beats_alignment_only_and_untrained(reference_world):
    started = time.perf_counter()
    for seed in (0, 1, 2):
        world = reference_world(seed)
        task = make_eval_tasks(world, TemplateKind.OBJECT_COMPOSITION, seed=seed)
        base = TrainConfig(learning_rate=3e-3, warmup_steps=20, batch_size=64, total_steps=200, seed=seed,
                           log_every=0)
        runs = {"untrained": replace(base, total_steps=0),
                "no_compose": replace(base, loss=LossConfig(use_compose=False)),
                "full": base}
        recall = {}
        for name, config in runs.items():
            params = train(world.store, world.encoders, config).params
            recall[name] = evaluate(params, [task], world.encoders, ks=(1,)).recall(task.name, 1)
        assert recall["full"] > recall["no_compose"], (seed, recall)
        assert recall["full"] > recall["untrained"], (seed, recall)
    assert time.perf_counter() - started < 300.0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
