import json
from dataclasses import replace

import numpy as np
import pytest

from spandistill.corpus import SynthSpec, Vocabulary, generate_synthetic
from spandistill.distill import DistillConfig, annotate_example
from spandistill.errors import ConfigError, DataError, NumericsError
from spandistill.reader import ReaderConfig
from spandistill.training import (
    Adam,
    BenchReport,
    EpochRecord,
    RunManifest,
    TrainConfig,
    baseline_config,
    bench,
    clip_global_norm,
    eval_params,
    param_count,
    predict_answers,
    predict_answers_ensemble,
    train_model,
    train_teacher_ensemble,
)


def tiny_config(**kwargs):
    defaults = dict(
        seed=3, epochs=2, batch_size=4, learning_rate=1e-3,
        reader=ReaderConfig(dim=8, hidden=8, window=1),
        distill=DistillConfig(),
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def world():
    train = generate_synthetic(SynthSpec(seed=9, num_passages=6))
    dev = generate_synthetic(SynthSpec(seed=10, num_passages=3))
    vocab = Vocabulary.from_examples(train)
    return train, dev, vocab


@pytest.fixture(scope="module")
def annotated(world):
    train, dev, vocab = world
    members = train_teacher_ensemble(tiny_config(), train, dev, vocab)
    mp = [m.params for m in members]
    ann = {ex.id: annotate_example(mp, ex, vocab, DistillConfig()) for ex in train}
    return mp, ann


# -- config ----------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {"epochs": 0},
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"clip_norm": 0.0},
    {"warmup_epochs": -1},
    {"truncate_cap": 0},
])
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        tiny_config(**kwargs).validate()


def test_baseline_config_turns_everything_off():
    cfg = baseline_config(tiny_config(distill=DistillConfig(stagewise=True)))
    d = cfg.distill
    assert not (d.use_kd or d.use_ans or d.use_att or d.stagewise)
    assert cfg.seed == 3  # everything else untouched


# -- optimizer -------------------------------------------------------------------


def test_adam_first_step_closed_form():
    w = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([0.3, -0.1, 2.0])
    opt = Adam(w, lr=0.01)
    opt.step({"w": g.copy()})
    # bias correction makes step one equal lr * g / (|g| + eps)
    want = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    assert np.allclose(w["w"], want, atol=1e-15)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    w = {"a": rng.normal(size=4), "b": rng.normal(size=(2, 2))}
    ref = {k: v.copy() for k, v in w.items()}
    opt = Adam(w, lr=0.05)

    m = {k: np.zeros_like(v) for k, v in ref.items()}
    v = {k: np.zeros_like(val) for k, val in ref.items()}
    b1, b2 = 0.9, 0.999
    for t in range(1, 6):
        grads = {k: rng.normal(size=val.shape) for k, val in ref.items()}
        opt.step({k: g.copy() for k, g in grads.items()})
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1.0 - b1) * g
            v[k] = b2 * v[k] + (1.0 - b2) * (g * g)
            m_hat = m[k] / (1.0 - b1 ** t)
            v_hat = v[k] / (1.0 - b2 ** t)
            ref[k] -= 0.05 * m_hat / (np.sqrt(v_hat) + 1e-8)
    for k in ref:
        assert np.array_equal(w[k], ref[k])


def test_adam_updates_in_place():
    arr = np.ones(3)
    opt = Adam({"w": arr}, lr=0.1)
    opt.step({"w": np.ones(3)})
    assert arr is opt.arrays["w"]
    assert not np.array_equal(arr, np.ones(3))


# -- gradient clipping -------------------------------------------------------------


def test_clip_global_norm_arithmetic():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 5.0) == pytest.approx(5.0)
    assert grads["a"][0] == 3.0  # at the threshold: untouched

    returned = clip_global_norm(grads, 2.5)
    assert returned == pytest.approx(5.0)  # reports the pre-clip norm
    assert grads["a"][0] == pytest.approx(1.5)
    assert grads["b"][0] == pytest.approx(2.0)


def test_clip_below_threshold_is_identity():
    g = np.array([0.1, -0.2])
    grads = {"g": g.copy()}
    clip_global_norm(grads, 5.0)
    assert np.array_equal(grads["g"], g)


# -- training loop ------------------------------------------------------------------


def test_training_is_deterministic(world):
    train, dev, vocab = world
    cfg = baseline_config(tiny_config())
    a = train_model(cfg, train, dev, vocab)
    b = train_model(cfg, train, dev, vocab)
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]
    for k in a.params.arrays:
        assert np.array_equal(a.params.arrays[k], b.params.arrays[k])

    c = train_model(replace(cfg, seed=4), train, dev, vocab)
    assert [h.train_loss for h in a.history] != [h.train_loss for h in c.history]


def test_unused_annotations_do_not_perturb_baseline(world, annotated):
    # switches off: the tape must be byte-for-byte the CE graph even when
    # distilled records are sitting right there
    train, dev, vocab = world
    _, ann = annotated
    cfg = baseline_config(tiny_config())
    plain = train_model(cfg, train, dev, vocab)
    loaded = train_model(cfg, train, dev, vocab, annotations=ann)
    assert [h.train_loss for h in plain.history] == [h.train_loss for h in loaded.history]
    for k in plain.params.arrays:
        assert np.array_equal(plain.params.arrays[k], loaded.params.arrays[k])


def test_model_selection_keeps_best_dev_epoch(world):
    train, dev, vocab = world
    res = train_model(baseline_config(tiny_config(epochs=3)), train, dev, vocab)
    f1s = [h.dev_f1 for h in res.history]
    assert res.best_f1 == max(f1s)
    assert res.best_epoch == f1s.index(max(f1s))
    assert len(res.history) == 3
    assert all(h.phase == "joint" for h in res.history)


def test_distillation_requires_annotations(world):
    train, dev, vocab = world
    with pytest.raises(DataError, match="no distilled record"):
        train_model(tiny_config(), train, dev, vocab)


def test_tau_mismatch_rejected_up_front(world):
    train, dev, vocab = world
    members = [train_teacher_ensemble(tiny_config(epochs=1), train, dev, vocab,
                                      n_members=1)[0].params]
    ann = {ex.id: annotate_example(members, ex, vocab, DistillConfig(tau=3.0))
           for ex in train}
    with pytest.raises(ConfigError, match="tau"):
        train_model(tiny_config(), train, dev, vocab, annotations=ann)


def test_baseline_cannot_train_on_soft_only_examples(world):
    train, dev, vocab = world
    cfg = baseline_config(tiny_config())
    with pytest.raises(DataError, match="no trainable examples"):
        train_model(cfg, train, dev, vocab, soft_only_ids={ex.id for ex in train})


def test_student_trains_on_soft_only_examples(world, annotated):
    train, dev, vocab = world
    _, ann = annotated
    res = train_model(tiny_config(epochs=1), train, dev, vocab,
                      annotations=ann, soft_only_ids={train[0].id})
    assert np.isfinite(res.history[0].train_loss)


def test_stagewise_phases(world, annotated):
    train, dev, vocab = world
    _, ann = annotated
    cfg = tiny_config(epochs=3, warmup_epochs=2,
                      distill=DistillConfig(stagewise=True))
    res = train_model(cfg, train, dev, vocab, annotations=ann)
    assert [h.phase for h in res.history] == ["warmup", "warmup", "joint"]


def test_divergence_raises_numerics_error(world):
    train, dev, vocab = world
    cfg = baseline_config(tiny_config(epochs=4, learning_rate=1e5, clip_norm=1e9))
    with pytest.raises(NumericsError):
        train_model(cfg, train, dev, vocab)


def test_epoch_record_as_dict_keys():
    rec = EpochRecord(epoch=0, phase="joint", train_loss=1.0, dev_em=50.0,
                      dev_f1=60.0, seconds=0.1)
    assert set(rec.as_dict()) == {"epoch", "phase", "train_loss", "dev_em",
                                  "dev_f1", "seconds"}


# -- ensembles and prediction ---------------------------------------------------------


def test_teacher_ensemble_members_differ(world, annotated):
    mp, _ = annotated
    assert len(mp) == 3
    assert not np.array_equal(mp[0].arrays["embed"], mp[1].arrays["embed"])
    assert not np.array_equal(mp[1].arrays["embed"], mp[2].arrays["embed"])


def test_teacher_ensemble_size_override(world):
    train, dev, vocab = world
    res = train_teacher_ensemble(tiny_config(epochs=1), train, dev, vocab, n_members=2)
    assert len(res) == 2
    with pytest.raises(ConfigError):
        train_teacher_ensemble(tiny_config(), train, dev, vocab, n_members=0)


def test_predictions_cover_every_example(world, annotated):
    train, dev, vocab = world
    mp, _ = annotated
    preds = predict_answers(mp[0], dev, vocab)
    assert set(preds) == {ex.id for ex in dev}
    assert all(isinstance(v, str) and v for v in preds.values())
    ens = predict_answers_ensemble(mp, dev, vocab)
    assert set(ens) == set(preds)


def test_predicted_text_comes_from_the_passage(world, annotated):
    train, dev, vocab = world
    mp, _ = annotated
    by_id = {ex.id: ex for ex in dev}
    for ex_id, text in predict_answers(mp[0], dev, vocab).items():
        assert text in by_id[ex_id].raw_context


def test_eval_params_report(world, annotated):
    train, dev, vocab = world
    mp, _ = annotated
    report = eval_params(mp[0], dev, vocab)
    assert report.total == len(dev)
    assert 0.0 <= report.f1 <= 100.0
    assert report.missing == 0


# -- benchmark -----------------------------------------------------------------------


def test_bench_counts_and_ratio(world, annotated):
    train, dev, vocab = world
    mp, _ = annotated
    report = bench(mp[0], mp, dev, vocab, repetitions=3)
    assert isinstance(report, BenchReport)
    assert report.student_param_count == report.member_param_count
    assert report.ensemble_param_count == 3 * report.member_param_count
    assert report.ratio > 1.5  # three sequential members cost more than one
    assert report.repetitions == 3
    assert len(report.lines()) == 3
    assert set(report.as_dict()) >= {"ratio", "student_seconds", "ensemble_seconds"}


def test_bench_rejects_too_few_repetitions(world, annotated):
    train, dev, vocab = world
    mp, _ = annotated
    with pytest.raises(ConfigError):
        bench(mp[0], mp, dev, vocab, repetitions=2)


def test_param_count_matches_array_sizes(world, annotated):
    mp, _ = annotated
    assert param_count(mp[0]) == sum(a.size for a in mp[0].arrays.values())


# -- run manifest ----------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    ckpt = tmp_path / "model.ckpt"
    ckpt.write_bytes(b"stub")
    manifest = RunManifest(
        command="train-student",
        config={"epochs": 2},
        corpus_hashes={"train": "abc"},
        checkpoint_paths=[str(ckpt)],
        metric_history=[{"epoch": 0, "dev_f1": 50.0}],
        timings={"total_s": 1.5},
    )
    out = tmp_path / "manifest.json"
    manifest.write(out)
    payload = json.loads(out.read_text())
    assert payload["command"] == "train-student"
    assert payload["checkpoint_paths"] == [str(ckpt)]
    assert payload["created"]


def test_manifest_refuses_missing_checkpoint(tmp_path):
    manifest = RunManifest(command="x", config={},
                           checkpoint_paths=[str(tmp_path / "gone.ckpt")])
    with pytest.raises(DataError):
        manifest.write(tmp_path / "manifest.json")
