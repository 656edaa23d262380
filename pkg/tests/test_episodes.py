"""Episode sampling, the training loop protocol, and evaluation reports."""

import numpy as np
import pytest

import fewshot.episodes as E
import fewshot.model as M
from fewshot.data import split_classes, synth_dataset
from fewshot.errors import CapacityError, NumericError

from helpers import tiny_model


def small_dataset(train=8, val=3, test=3, per_class=8, size=12, seed=0, outlier_rate=0.0):
    total = train + val + test
    ds = synth_dataset(total, per_class, size, noise_sd=0.05, outlier_rate=outlier_rate, seed=seed)
    return split_classes(ds, (train, val, test), np.random.default_rng(seed + 1))


def small_model(seed=0, ways=3, shots=1, size=12):
    return tiny_model(
        rng_seed=seed, ways=ways, shots=shots, embed_channels=3, attn_channels=3,
        image_size=size,
    )


# ---------------------------------------------------------------------------
# sampling


def test_sample_episode_paper_counts():
    ds = small_dataset(train=8, per_class=16)
    spec = E.EpisodeSpec(ways=5, shots=1, n_query=15)
    ep = E.sample_episode(ds, spec, np.random.default_rng(0))
    assert ep.support_x.shape[0] == 5
    assert ep.query_x.shape[0] == 75
    assert set(ep.support_y) == set(range(5))


def test_sample_episode_forced_draw_uses_everything():
    ds = small_dataset(train=3, val=0, test=0, per_class=4)
    spec = E.EpisodeSpec(ways=3, shots=1, n_query=3)
    ep = E.sample_episode(ds, spec, np.random.default_rng(1))
    used = {(c, i) for c, i in ep.support_refs} | {(c, i) for c, i in ep.query_refs}
    want = {(c, i) for c in ds.class_ids("train") for i in range(4)}
    assert used == want


def test_sample_episode_deterministic():
    ds = small_dataset()
    spec = E.EpisodeSpec(ways=3, shots=2, n_query=2)
    a = E.sample_episode(ds, spec, np.random.default_rng(7))
    b = E.sample_episode(ds, spec, np.random.default_rng(7))
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.query_x, b.query_x)
    assert a.support_refs == b.support_refs


def test_sample_episode_capacity_error_names_deficit():
    ds = small_dataset(train=3)
    spec = E.EpisodeSpec(ways=5, shots=1, n_query=2)
    with pytest.raises(CapacityError, match="3 classes"):
        E.sample_episode(ds, spec, np.random.default_rng(0))


def test_sample_episode_support_query_disjoint_and_same_label_space():
    ds = small_dataset()
    spec = E.EpisodeSpec(ways=3, shots=2, n_query=3)
    rng = np.random.default_rng(2)
    for _ in range(50):
        ep = E.sample_episode(ds, spec, rng)
        sup = set(ep.support_refs)
        qry = set(ep.query_refs)
        assert not sup & qry
        assert set(ep.query_y) <= set(ep.support_y) == set(range(3))
        # every class contributes exactly shots + n_query distinct examples
        for cid, label in ep.class_map.items():
            s = [r for r in ep.support_refs if r[0] == cid]
            q = [r for r in ep.query_refs if r[0] == cid]
            assert len(s) == 2 and len(q) == 3


def test_episode_spec_validation():
    with pytest.raises(ValueError):
        E.EpisodeSpec(ways=1, shots=1, n_query=1)
    with pytest.raises(ValueError):
        E.EpisodeSpec(ways=2, shots=0, n_query=1)


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_learning_rate_halves_on_schedule():
    assert E.learning_rate_at(1, 0.001, 20_000) == 0.001
    assert E.learning_rate_at(19_999, 0.001, 20_000) == 0.001
    assert E.learning_rate_at(20_000, 0.001, 20_000) == 0.0005
    assert E.learning_rate_at(40_000, 0.001, 20_000) == 0.00025
    assert E.learning_rate_at(65_000, 0.001, 20_000) == 0.000125


# ---------------------------------------------------------------------------
# meta-training


def _train_config(episodes, seed=0, **kw):
    defaults = dict(
        spec=E.EpisodeSpec(ways=3, shots=1, n_query=2),
        episodes=episodes,
        meta_batch=4,
        lr=0.001,
        val_every=1000,
        val_tasks=4,
        dropout_keep=1.0,
        seed=seed,
    )
    defaults.update(kw)
    return E.TrainConfig(**defaults)


def test_meta_train_zero_episodes_returns_params_unchanged():
    config, params = small_model()
    ds = small_dataset()
    before = {n: a.copy() for n, a in params.named_arrays()}
    result = E.meta_train(params, config, ds, _train_config(0))
    for n, a in result.params.named_arrays():
        assert np.array_equal(a, before[n])
    assert result.log_rows == []


def test_meta_train_one_log_row_per_episode():
    config, params = small_model()
    ds = small_dataset()
    result = E.meta_train(params, config, ds, _train_config(10))
    assert [row[0] for row in result.log_rows] == list(range(1, 11))
    # rows within one meta-batch share the step's loss
    assert len({row[2] for row in result.log_rows[:4]}) == 1


def test_meta_train_four_episodes_per_optimizer_step(monkeypatch):
    config, params = small_model()
    ds = small_dataset()
    steps = []
    real = E.adam_step

    def spy(p, g, s, lr):
        steps.append(lr)
        return real(p, g, s, lr)

    monkeypatch.setattr(E, "adam_step", spy)
    sampled = []
    real_sample = E.sample_episode

    def sample_spy(d, spec, rng):
        sampled.append(spec.split)
        return real_sample(d, spec, rng)

    monkeypatch.setattr(E, "sample_episode", sample_spy)
    E.meta_train(params, config, ds, _train_config(12))
    assert len(steps) == 3  # 12 episodes / meta-batch 4
    assert sampled.count("train") == 12


def test_meta_train_parameters_actually_move():
    config, params = small_model()
    ds = small_dataset()
    before = {n: a.copy() for n, a in params.named_arrays()}
    E.meta_train(params, config, ds, _train_config(8))
    moved = sum(
        0 if np.array_equal(a, before[n]) else 1 for n, a in params.named_arrays()
    )
    assert moved > 10


def test_meta_train_validation_cadence_and_best_params(monkeypatch):
    config, params = small_model()
    ds = small_dataset()
    cfg = _train_config(12, val_every=4, val_tasks=2)
    accs = iter([0.5, 0.9, 0.7])
    monkeypatch.setattr(E, "_validate", lambda *a, **k: next(accs))
    result = E.meta_train(params, config, ds, cfg)
    val_rows = [(e, v) for e, _, _, v in result.log_rows if v is not None]
    assert [e for e, _ in val_rows] == [4, 8, 12]
    assert result.best_val_acc == 0.9


def test_meta_train_aborts_on_nan_loss(monkeypatch):
    config, params = small_model()
    ds = small_dataset()

    class FakeLoss:
        def item(self):
            return float("nan")

    monkeypatch.setattr(E.M, "episode_loss", lambda *a, **k: FakeLoss())
    with pytest.raises(NumericError, match="episode 1"):
        E.meta_train(params, config, ds, _train_config(4))


def test_meta_train_reproducible_given_seed_and_config():
    ds = small_dataset()
    runs = []
    for _ in range(2):
        config, params = small_model(seed=3)
        result = E.meta_train(params, config, ds, _train_config(8, seed=11, dropout_keep=0.5))
        runs.append((result.log_rows, {n: a.copy() for n, a in result.params.named_arrays()}))
    assert runs[0][0] == runs[1][0]
    for n in runs[0][1]:
        assert np.array_equal(runs[0][1][n], runs[1][1][n])


def test_meta_train_mask_per_episode(monkeypatch):
    config, params = small_model()
    ds = small_dataset()
    masks = []
    real = E.M.episode_loss

    def spy(ep, p, c, mask=None, rng=None, aggregation="attention"):
        masks.append(mask)
        return real(ep, p, c, mask=mask, rng=rng, aggregation=aggregation)

    monkeypatch.setattr(E.M, "episode_loss", spy)
    E.meta_train(params, config, ds, _train_config(8, dropout_keep=0.5))
    assert len(masks) == 8
    assert all(m is not None for m in masks)
    flat = [tuple(m.masks[2]) + tuple(m.masks[3]) for m in masks]
    assert len(set(flat)) > 1  # fresh draw per task


def test_meta_train_keep_one_disables_masks(monkeypatch):
    config, params = small_model()
    ds = small_dataset()
    masks = []
    real = E.M.episode_loss

    def spy(ep, p, c, mask=None, rng=None, aggregation="attention"):
        masks.append(mask)
        return real(ep, p, c, mask=mask, rng=rng, aggregation=aggregation)

    monkeypatch.setattr(E.M, "episode_loss", spy)
    E.meta_train(params, config, ds, _train_config(4, dropout_keep=1.0))
    assert masks == [None] * 4


# ---------------------------------------------------------------------------
# confidence intervals


def test_confidence_interval_constant_sequence():
    mean, half = E.confidence_interval([0.8] * 600)
    assert mean == 0.8
    assert half == 0.0


def test_confidence_interval_zero_one_hand_value():
    mean, half = E.confidence_interval([0.0, 1.0])
    assert mean == 0.5
    # s = 0.7071..., sqrt(T) = 1.414...: half becomes exactly 1.96 * 0.5
    assert abs(half - 0.98) < 1e-12


def test_confidence_interval_bernoulli_analytic():
    rng = np.random.default_rng(123)
    draws = (rng.random(600) < 0.7).astype(float)
    mean, half = E.confidence_interval(draws)
    p = draws.mean()
    want = 1.96 * np.sqrt(p * (1 - p) * 600 / 599) / np.sqrt(600)
    assert abs(half - want) < 1e-12
    assert abs(half - 0.0367) < 0.004


def test_confidence_interval_needs_two_points():
    with pytest.raises(ValueError):
        E.confidence_interval([0.5])


# ---------------------------------------------------------------------------
# meta-testing


def test_meta_test_oracle_predictor_scores_perfectly():
    ds = small_dataset()
    config, params = small_model()
    spec = E.EpisodeSpec(ways=3, shots=1, n_query=2, split="test")
    report = E.meta_test(
        params, config, ds, spec, tasks_per_seed=5, seeds=[0, 1],
        predict_fn=lambda ep, rng: ep.query_y,
    )
    assert report.mean_accuracy == 1.0
    assert report.half_width == 0.0
    assert report.best == report.worst == report.average == 1.0


def test_meta_test_random_predictor_near_chance():
    ds = small_dataset(train=0, val=0, test=6, per_class=10)
    config, params = small_model()
    spec = E.EpisodeSpec(ways=5, shots=1, n_query=5, split="test")

    def rand_predict(ep, rng):
        return rng.integers(0, 5, size=len(ep.query_y))

    report = E.meta_test(params, config, ds, spec, tasks_per_seed=80, seeds=[0, 1, 2],
                         predict_fn=rand_predict)
    assert abs(report.mean_accuracy - 0.2) < 0.05


def test_meta_test_constant_per_task_accuracy_zero_half_width():
    report = E.build_report([0], [[0.8] * 600], 600)
    assert report.mean_accuracy == 0.8
    assert report.half_width == 0.0


def test_meta_test_report_orderings():
    report = E.build_report([0, 1, 2], [[0.5, 0.7], [0.9, 0.9], [0.2, 0.4]], 2)
    assert report.best == 0.9
    assert report.worst == pytest.approx(0.3)
    assert report.worst <= report.average <= report.best


def test_meta_test_never_applies_dropout(monkeypatch):
    ds = small_dataset()
    config, params = small_model()
    spec = E.EpisodeSpec(ways=3, shots=1, n_query=2, split="test")

    def boom(*a, **k):
        raise AssertionError("dropout consulted during meta-test")

    monkeypatch.setattr(M, "dropout_apply", boom)
    monkeypatch.setattr(M, "sample_task_mask", boom)
    report = E.meta_test(params, config, ds, spec, tasks_per_seed=3, seeds=[0])
    assert 0.0 <= report.mean_accuracy <= 1.0


def test_meta_test_deterministic_for_seed_list():
    ds = small_dataset()
    config, params = small_model()
    spec = E.EpisodeSpec(ways=3, shots=1, n_query=2, split="test")
    a = E.meta_test(params, config, ds, spec, 4, [5, 6])
    b = E.meta_test(params, config, ds, spec, 4, [5, 6])
    assert a == b
