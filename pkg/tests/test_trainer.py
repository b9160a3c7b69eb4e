import json

import numpy as np
import pytest

import lifelongpr.trainer as tr
from lifelongpr.data import DomainProfile, SequenceSpec, generate_sequence
from lifelongpr.encoder import load_checkpoint
from lifelongpr.metrics import load_matrix
from lifelongpr.prompt import init_prompt
from lifelongpr.selection import ReplayBuffer, load_buffer
from lifelongpr.trainer import StageConfig, StageFailure, fresh_model, run_sequence, train_stage

TINY = dict(world_extent=50.0, n_train=40, n_database=16, n_query=16)


@pytest.fixture(scope="module")
def tiny_domains():
    profs = [DomainProfile(name="a", **TINY),
             DomainProfile(name="b", **TINY, height_scale=0.4, clutter_fraction=0.3,
                           clutter_z_min=2.0, clutter_z_max=4.0)]
    return generate_sequence(SequenceSpec(profs, seed=1, n_points=48))


def _cfg(method, **kw):
    base = dict(method=method, epochs=2, epochs_stage1=2, epochs_stage2=2, k_total=16)
    base.update(kw)
    return StageConfig(**base)


@pytest.fixture
def spy(monkeypatch):
    calls = []
    real = tr._train_loop

    def wrapper(model, trainable, epochs, lr, batches_fn, cfg, splits, replay_old,
                stage_tag, t, use_kd):
        before = {"enc": model.checksum("enc."), "prompt": model.checksum("prompt.")}
        batches = list(batches_fn(0)) if epochs else []
        out = real(model, trainable, epochs, lr, batches_fn, cfg, splits, replay_old,
                   stage_tag, t, use_kd)
        calls.append({"t": t, "stage": stage_tag, "lr": lr, "epochs": epochs,
                      "before": before, "use_kd": use_kd, "batches": batches,
                      "after": {"enc": model.checksum("enc."),
                                "prompt": model.checksum("prompt.")}})
        return out

    monkeypatch.setattr(tr, "_train_loop", wrapper)
    return calls


def test_two_stage_freezing_and_exposure(tiny_domains, spy):
    cfg = _cfg("lifelongpr")
    run_sequence(tiny_domains, cfg, seed=3)
    first = [c for c in spy if c["t"] == 1]
    assert [c["stage"] for c in first] == ["single"]
    assert first[0]["before"]["prompt"] == first[0]["after"]["prompt"]
    s1, s2 = [c for c in spy if c["t"] == 2]
    assert (s1["stage"], s2["stage"]) == ("stage1", "stage2")
    assert (s1["lr"], s2["lr"]) == (cfg.lr_stage1, cfg.lr_stage2)
    assert s1["before"]["enc"] == s1["after"]["enc"]
    assert s1["before"]["prompt"] != s1["after"]["prompt"]
    assert s2["before"]["prompt"] == s2["after"]["prompt"]
    assert s2["before"]["enc"] != s2["after"]["enc"]
    # every stage-2 batch carries replay anchors with distillation targets
    for X, keys, B, kd_rows, kd_keys in s2["batches"]:
        assert len(kd_rows) >= 1 and len(kd_keys) == len(kd_rows)
        assert all(k[0] == 0 for k in kd_keys)
    # stage-1 batches only hold replay samples
    for X, keys, B, kd_rows, kd_keys in s1["batches"]:
        assert len(kd_rows) == B


def test_first_domain_fills_buffer_and_keeps_prompt(tiny_domains):
    cfg = _cfg("lifelongpr")
    prev = fresh_model(cfg, 0)
    model, buf, entry = train_stage(1, tiny_domains[0], ReplayBuffer(16), prev, cfg, 0, {})
    assert len(buf) == 16 and buf.domain_ids == [0]
    assert model.checksum("prompt.") == prev.checksum("prompt.")
    train_ids = {s.id for s in tiny_domains[0].train}
    assert set(buf.sets[0].ids) <= train_ids
    assert all(r["weight"] == 0.0 for r in entry.losses)


def test_finetune_rejects_replay_buffer(tiny_domains):
    cfg = _cfg("lifelongpr")
    _, buf, _ = train_stage(1, tiny_domains[0], ReplayBuffer(16), fresh_model(cfg, 0), cfg, 0,
                            {})
    ft = _cfg("finetune")
    with pytest.raises(StageFailure):
        train_stage(2, tiny_domains[1], buf, fresh_model(ft, 0), ft, 0, {})


def test_finetune_has_no_kd_and_no_buffer(tiny_domains, spy):
    rec = run_sequence(tiny_domains, _cfg("finetune"), seed=0)
    assert not any(c["use_kd"] for c in spy)
    assert len(rec.buffer) == 0 and rec.matrix.complete


def test_replay_only_uses_kd_after_first_domain(tiny_domains, spy):
    run_sequence(tiny_domains, _cfg("replay_only"), seed=0)
    assert [c["use_kd"] for c in spy] == [False, True]
    assert all(len(b[3]) >= 1 for b in spy[1]["batches"])


def test_single_domain_run(tiny_domains):
    rec = run_sequence(tiny_domains[:1], _cfg("lifelongpr"), seed=0)
    assert rec.matrix.T == 1 and len(rec.matrix.rows[0]) == 1
    assert all(r["weight"] == 0.0 and r["L_KD"] == 0.0 for s in rec.stages for r in s.losses)


def test_determinism_and_resume(tiny_domains, tmp_path):
    cfg = _cfg("lifelongpr")
    a = run_sequence(tiny_domains, cfg, seed=5, out_dir=tmp_path / "full")
    b = run_sequence(tiny_domains, cfg, seed=5)
    assert a.matrix.rows == b.matrix.rows
    part = run_sequence(tiny_domains, cfg, seed=5, out_dir=tmp_path / "part", stop_after=1)
    assert not part.complete and len(part.matrix.rows) == 1
    resumed = run_sequence(tiny_domains, cfg, seed=5, out_dir=tmp_path / "part")
    assert resumed.matrix.rows == a.matrix.rows
    assert resumed.model.checksum() == a.model.checksum()
    assert (tmp_path / "part" / "loss_curve.csv").read_text() == \
        (tmp_path / "full" / "loss_curve.csv").read_text()


def test_run_directory_layout(tiny_domains, tmp_path):
    out = tmp_path / "run"
    rec = run_sequence(tiny_domains, _cfg("replay_only"), seed=2, out_dir=out)
    for name in ("config.json", "stage_01.ckpt", "stage_02.ckpt", "buffer_01.json",
                 "buffer_02.json", "recall_matrix.json", "loss_curve.csv", "metrics.json",
                 "metrics.txt"):
        assert (out / name).exists(), name
    assert load_matrix(out / "recall_matrix.json").rows == rec.matrix.rows
    assert load_checkpoint(out / "stage_02.ckpt").checksum() == rec.model.checksum()
    b1, b2 = load_buffer(out / "buffer_01.json"), load_buffer(out / "buffer_02.json")
    assert set(b2.sets[0].ids) <= set(b1.sets[0].ids)
    header = (out / "loss_curve.csv").read_text().splitlines()[0]
    assert header == "t,stage,epoch,L_PR,L_KD,weight"
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["F"] == rec.summary()["F"]


def test_config_mismatch_on_resume(tiny_domains, tmp_path):
    run_sequence(tiny_domains, _cfg("finetune"), seed=0, out_dir=tmp_path, stop_after=1)
    with pytest.raises(StageFailure):
        run_sequence(tiny_domains, _cfg("finetune", margin=0.3), seed=0, out_dir=tmp_path)


def test_config_validation():
    with pytest.raises(ValueError, match="lam"):
        StageConfig(lam=1.0).validate()
    with pytest.raises(ValueError, match="method"):
        StageConfig(method="ewc").validate()
    with pytest.raises(ValueError, match="bogus"):
        StageConfig.from_dict({"bogus": 1})


def test_stage_failure_wraps_errors(tiny_domains, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(tr, "_train_loop", boom)
    with pytest.raises(StageFailure, match="stage 1"):
        run_sequence(tiny_domains, _cfg("finetune"), seed=0)


def test_prompt_defaults_match_sizes():
    m = fresh_model(StageConfig(), 0)
    ref = init_prompt(0, 32)
    assert {k: v.shape for k, v in m.subset("prompt.").items()} == \
        {k: v.shape for k, v in ref.items()}
    assert np.all(m.params["prompt.out_w"] == 0)
