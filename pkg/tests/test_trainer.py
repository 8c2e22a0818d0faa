"""Alternating search, retraining, random search and checkpoints on a tiny task."""

import math

import numpy as np
import pytest

from conformer_nas.core.dependencies import get_dataset
from conformer_nas.core.exceptions import DivergenceError, NasError
from conformer_nas.schemas.config import DssConfig, RunConfig, SearchConfig
from conformer_nas.services import artifacts
from conformer_nas.services.data import make_batches
from conformer_nas.services.search_space import build_supernet
from conformer_nas.services.trainer import (
    DataAccessCounter,
    alpha_gate,
    compare_schedules,
    evaluate,
    network_from_checkpoint,
    new_train_state,
    replay_alpha_update_steps,
    restore_search,
    retrain,
    run_random_search,
    run_search,
    search_step,
)


def scalar_gate_loop(total_steps, beta, warmup):
    updates, last = [], 0
    for step in range(total_steps):
        inner = max(beta * (step - warmup) / warmup, 0.0)
        threshold = math.inf if inner == 0.0 else inner ** -0.5
        if step - last >= threshold:
            updates.append(step)
            last = step
    return updates


@pytest.fixture
def long_config(tiny_config):
    """Six epochs of two batches: warm-up covers steps 0-4, updates from step 5 on."""
    return tiny_config.model_copy(update={"search": SearchConfig(epochs=6, batch_size=4)})


def _batches(config, dataset):
    train = make_batches(dataset.train, config.search.batch_size, "train")
    valid = make_batches(dataset.valid, config.search.batch_size, "valid")
    return train, valid


class TestGate:

    def test_replay_matches_scalar_loop(self):
        config = DssConfig()
        updates = replay_alpha_update_steps(50000, config)
        assert updates == scalar_gate_loop(50000, 2.0, 25000)
        assert updates[0] == 25001
        assert set(range(37500, 50000)) <= set(updates)

    def test_force_one_updates_every_step(self):
        assert replay_alpha_update_steps(10, DssConfig(force_one=True)) == list(range(10))

    def test_gate_on_fresh_state(self):
        state = new_train_state(0)
        assert alpha_gate(state, DssConfig(warmup_steps=4)) == (math.inf, False)
        assert alpha_gate(state, DssConfig(force_one=True))[1]

    def test_desk_preset_leaves_room_after_warmup(self):
        desk = RunConfig.desk()
        steps = desk.search.epochs * len(make_batches(get_dataset(desk).train, desk.search.batch_size, "train"))
        updates = replay_alpha_update_steps(steps, desk.dss)
        assert desk.dss.warmup_steps < steps // 2
        assert updates[0] == desk.dss.warmup_steps + 1
        assert len(updates) > steps // 2
        assert updates[-1] == steps - 1


class TestSearchStep:

    def test_alpha_untouched_during_warmup(self, tiny_config, tiny_dataset):
        supernet = build_supernet(tiny_config.space, 0)
        before = {k: v.copy() for k, v in supernet.alpha.state_dict().items()}
        state = new_train_state(0)
        train, valid = _batches(tiny_config, tiny_dataset)
        for step in range(4):
            row = search_step(state, supernet, train[step % 2], valid[0], tiny_config)
            assert not row.alpha_updated and row.valid_loss is None
        for name, value in supernet.alpha.state_dict().items():
            np.testing.assert_array_equal(value, before[name])
        assert state.step == 4 and state.last_alpha_step == 0

    def test_one_step_updates_alpha_at_step_zero(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"dss": DssConfig(warmup_steps=4, force_one=True)})
        supernet = build_supernet(config.space, 0)
        state = new_train_state(0)
        train, valid = _batches(config, tiny_dataset)
        row = search_step(state, supernet, train[0], valid[0], config)
        assert row.alpha_updated and row.valid_loss is not None
        assert state.alpha_updates == [0]
        assert any(np.any(p.data != 0.0) for p in supernet.alpha.parameters())

    def test_validation_data_never_reaches_weights(self, long_config, tiny_dataset):
        counter = DataAccessCounter()
        result = run_search(long_config, tiny_dataset, counter=counter)
        assert counter.reads("omega", "valid") == 0
        assert counter.reads("alpha", "train") == 0
        assert counter.reads("alpha", "valid") == len(result.state.alpha_updates) > 0
        assert counter.reads("omega", "train") == result.state.step

    def test_alpha_step_keeps_running_statistics(self, tiny_config, tiny_dataset):
        config = tiny_config.model_copy(update={"dss": DssConfig(warmup_steps=4, force_one=True)})
        supernet = build_supernet(config.space, 0)
        state = new_train_state(0)
        train, valid = _batches(config, tiny_dataset)
        reference = build_supernet(config.space, 0)
        search_step(state, supernet, train[0], valid[0], config)
        # Only the training batch, seen after the alpha step, may move batch-norm statistics.
        reference.alpha.load_state_dict(supernet.alpha.state_dict())
        reference.train()
        reference(train[0].tensor(), train[0].lengths)
        for (name, value), (_, expected) in zip(supernet.named_buffers(), reference.named_buffers()):
            np.testing.assert_allclose(value, expected, err_msg=name)

    def test_nan_weights_raise_divergence(self, tiny_config, tiny_dataset):
        supernet = build_supernet(tiny_config.space, 0)
        for p in supernet.embedding.parameters():
            p.data[...] = np.nan
        train, valid = _batches(tiny_config, tiny_dataset)
        with pytest.raises(DivergenceError) as info:
            search_step(new_train_state(0), supernet, train[0], valid[0], tiny_config)
        assert info.value.step == 0
        assert "training loss" in info.value.diagnostics


class TestRunSearch:

    def test_deterministic(self, long_config, tiny_dataset):
        a = run_search(long_config, tiny_dataset, seed=4)
        b = run_search(long_config, tiny_dataset, seed=4)
        assert a.genotype == b.genotype
        assert [r.train_loss for r in a.log] == [r.train_loss for r in b.log]
        assert [r.weights for r in a.log] == [r.weights for r in b.log]

    def test_logged_updates_follow_schedule(self, long_config, tiny_dataset):
        result = run_search(long_config, tiny_dataset)
        logged = [r.step for r in result.log if r.alpha_updated]
        assert logged == replay_alpha_update_steps(len(result.log), long_config.dss) == list(range(5, 12))
        for row in result.log:
            for weights in artifacts.group_weights(row.weights).values():
                assert abs(sum(w for _, w in weights) - 1.0) < 1e-9

    def test_artifacts_and_restore(self, long_config, tiny_dataset, tmp_path):
        result = run_search(long_config, tiny_dataset, out_dir=tmp_path)
        assert artifacts.read_genotype(tmp_path / artifacts.GENOTYPE_FILE) == result.genotype
        rows = artifacts.read_search_log(tmp_path / artifacts.SEARCH_LOG)
        assert [r.step for r in rows] == list(range(12))
        assert (tmp_path / "search-epoch006.json").is_file()

        checkpoint = artifacts.load_checkpoint(tmp_path / "checkpoint-final.json")
        assert checkpoint.genotype == result.genotype
        supernet, state = restore_search(checkpoint)
        assert (state.step, state.last_alpha_step) == (result.state.step, result.state.last_alpha_step)
        assert state.alpha_moments.step == len(result.state.alpha_updates)
        for name, value in result.supernet.alpha.state_dict().items():
            np.testing.assert_array_equal(supernet.alpha.state_dict()[name], value)
        for name, value in result.supernet.state_dict().items():
            np.testing.assert_array_equal(supernet.state_dict()[name], value)
        assert state.alpha_updates == result.state.alpha_updates
        assert supernet.dropout_rng.bit_generator.state == result.supernet.dropout_rng.bit_generator.state


class TestResume:

    def test_resumed_search_matches_uninterrupted(self, long_config, tiny_dataset, tmp_path):
        space = long_config.space.model_copy(update={"dropout_rate": 0.1})
        config = long_config.model_copy(update={"space": space})
        full = run_search(config, tiny_dataset, out_dir=tmp_path)
        checkpoint = artifacts.load_checkpoint(tmp_path / "search-epoch003.json")
        resumed = run_search(config, tiny_dataset, resume=checkpoint)
        assert [r.step for r in resumed.log] == list(range(6, 12))
        assert [r.train_loss for r in resumed.log] == [r.train_loss for r in full.log[6:]]
        assert [r.weights for r in resumed.log] == [r.weights for r in full.log[6:]]
        assert resumed.state.alpha_updates == full.state.alpha_updates
        assert resumed.genotype == full.genotype
        for name, value in full.supernet.state_dict().items():
            np.testing.assert_array_equal(resumed.supernet.state_dict()[name], value, err_msg=name)

    def test_derived_checkpoint_cannot_resume_search(self, tiny_config, tiny_dataset, tmp_path):
        genotype = run_search(tiny_config, tiny_dataset).genotype
        retrain(genotype, tiny_config, tiny_dataset, out_dir=tmp_path)
        checkpoint = artifacts.load_checkpoint(tmp_path / "checkpoint-final.json")
        with pytest.raises(NasError):
            run_search(tiny_config, tiny_dataset, resume=checkpoint)


class TestRetrain:

    def test_reproducible_and_finite(self, tiny_config, tiny_dataset):
        genotype = run_search(tiny_config, tiny_dataset).genotype
        a = retrain(genotype, tiny_config, tiny_dataset, seed=9)
        b = retrain(genotype, tiny_config, tiny_dataset, seed=9)
        assert a.metrics == b.metrics
        assert a.metrics.steps == 4
        assert len(a.metrics.epoch_train_losses) == 2
        assert math.isfinite(a.metrics.valid_loss)

    def test_checkpoint_reloads_same_model(self, tiny_config, tiny_dataset, tmp_path):
        genotype = run_search(tiny_config, tiny_dataset).genotype
        result = retrain(genotype, tiny_config, tiny_dataset, out_dir=tmp_path)
        checkpoint = artifacts.load_checkpoint(tmp_path / "checkpoint-final.json")
        model = network_from_checkpoint(checkpoint)
        original = evaluate(result.model, tiny_dataset.test, 4, "test")
        reloaded = evaluate(model, tiny_dataset.test, 4, "test")
        assert original == reloaded
        assert artifacts.read_jsonl(tmp_path / "metrics.jsonl")[0]["kind"] == "metrics"


class TestRandomSearch:

    def test_single_trial(self, tiny_config, tiny_dataset):
        result = run_random_search(tiny_config, tiny_dataset, trials=1)
        assert len(result.trials) == 1
        assert result.selection.trial == 0

    def test_selection_is_best_trial(self, tiny_config, tiny_dataset, tmp_path):
        result = run_random_search(tiny_config, tiny_dataset, out_dir=tmp_path)
        best = min(result.trials, key=lambda r: (r.valid_token_error_rate, r.valid_loss, r.trial))
        assert result.selection.trial == best.trial
        assert result.genotype.as_names() == [tuple(b) for b in best.genotype]
        records = artifacts.read_jsonl(tmp_path / "random_search.jsonl")
        assert [r["kind"] for r in records] == ["trial", "trial", "selection"]


class TestScheduleComparison:

    def test_paired_report(self, long_config, tiny_dataset, tmp_path):
        reports = compare_schedules(long_config, tiny_dataset, out_dir=tmp_path)
        by_mode = {r.mode: r for r in reports}
        assert set(by_mode) == {"dss", "one_step"}
        assert by_mode["one_step"].alpha_updates == by_mode["one_step"].search_steps == 12
        assert by_mode["dss"].alpha_updates == 7
        assert (tmp_path / "dss" / artifacts.GENOTYPE_FILE).is_file()
        assert len(artifacts.read_jsonl(tmp_path / "comparison.jsonl")) == 2
