import json
from pathlib import Path

import numpy as np
import pytest
from jsonschema import Draft7Validator

from src import checkpoint as ckpt
from src import harness
from src import tensor as T
from src.distill import TeacherNetwork, hard_label_loss, kd_loss
from src.errors import ConfigError, DomainError, NonFiniteLossError
from src.models import build
from src.quantizer import QuantizerSpec, WeightQuantizer

ROOT = Path(__file__).resolve().parents[1]


def _on_two_bit_grid(weights: np.ndarray) -> bool:
    # {-Δ, 0, +Δ}: at most two distinct magnitudes
    return len(np.unique(weights)) <= 3 and len(np.unique(np.abs(weights))) <= 2


def test_teacher_reaches_high_accuracy(teacher_path):
    meta = ckpt.load(teacher_path).metadata
    assert meta["role"] == "teacher"
    assert meta["epochs"] == 15
    assert meta["final_test_accuracy"] > 0.95


def test_teacher_training_is_deterministic(make_config, datasets, tmp_path):
    cfg = make_config()
    a = harness.train_teacher(cfg, seed=3, out_path=tmp_path / "a.qkdc", datasets=datasets, epochs=2)
    b = harness.train_teacher(cfg, seed=3, out_path=tmp_path / "b.qkdc", datasets=datasets, epochs=2)
    for name, value in a.params.items():
        assert np.array_equal(value, b.params[name])


def test_train_teacher_needs_a_model(make_config, datasets, tmp_path):
    cfg = make_config()
    cfg.teacher_model = None
    with pytest.raises(ConfigError, match="teacher_model"):
        harness.train_teacher(cfg, 0, tmp_path / "t.qkdc", datasets=datasets)


def test_lambda_zero_kd_matches_hard_label_training_bitwise(make_config, datasets, teacher_path):
    cfg = make_config()
    train, _ = datasets
    teacher = TeacherNetwork.from_checkpoint(teacher_path)

    def kd_fn(logits, batch, step):
        return kd_loss(logits, teacher.logits(batch.images), batch.labels, 2.0, 0.0), 0.0

    def hard_fn(logits, batch, step):
        return hard_label_loss(logits, batch.labels), 0.0

    models = []
    for loss_fn in (kd_fn, hard_fn):
        model = build(cfg.student.model, seed=1, dtype=np.float64)
        quantizer = WeightQuantizer(model, QuantizerSpec(2))
        trainer = harness.Trainer(model, cfg, epochs=13, seed=1, loss_fn=loss_fn, quantizer=quantizer)
        for epoch in range(13):
            trainer.run_epoch(train, epoch)
        assert trainer.step >= 100
        models.append(model)

    kd_model, hard_model = models
    for name, p in kd_model.named_parameters().items():
        assert np.array_equal(p.data, hard_model.named_parameters()[name].data), name


def test_evaluation_runs_on_quantized_weights(make_config, datasets):
    cfg = make_config()
    seen = []

    def before_eval(model):
        layers = list(model.weight_layers())
        quantized = all(layer.weight_q is not None and _on_two_bit_grid(layer.weight_q.data) for _, layer in layers)
        seen.append(not model.training and quantized)

    record = harness.train_student_kd(cfg, 1, datasets=datasets, hooks=harness.TrainerHooks(before_eval=before_eval))
    assert record.status == "ok"
    assert seen == [True, True]


def test_gslr_weight_decays_over_the_run(make_config, datasets, teacher_path):
    cfg = make_config(
        teacher={"checkpoint": str(teacher_path)},
        distill={"lambda_policy": {"kind": "gslr", "lambda0": 0.5}},
    )
    lams = []
    record = harness.train_student_kd(
        cfg, 1, datasets=datasets, hooks=harness.TrainerHooks(on_step=lambda step, loss, lam: lams.append(lam))
    )
    assert record.status == "ok"
    assert lams[0] == 0.5
    assert lams == sorted(lams, reverse=True)
    assert lams[-1] < 0.5 / len(lams) + 1e-12
    assert record.labels["lambda_policy"] == "gslr(0.5)"
    assert record.soft_labels["examples"] == len(datasets[0])
    assert record.soft_labels["mean_entropy"] >= record.soft_labels["mean_entropy_tau1"]


def test_non_finite_loss_marks_record_failed(make_config, datasets, monkeypatch, capsys):
    def exploding(logits, *args, **kwargs):
        return T.scale(T.sum(logits), float("nan"))

    monkeypatch.setattr(harness, "kd_loss", exploding)
    record = harness.train_student_kd(make_config(), 4, datasets=datasets)
    assert record.status == "failed"
    assert record.diagnostic["error"] == "non-finite-loss"
    assert (record.diagnostic["epoch"], record.diagnostic["step"]) == (0, 0)
    assert record.final_test_accuracy is None
    assert "status=failed" in capsys.readouterr().out


def test_diverging_weights_mark_record_failed(make_config, datasets, monkeypatch, capsys):
    cfg = make_config(optimizer={"student_epochs": 3})
    harness.ensure_student_init(cfg, 4, datasets=datasets)
    real_sgd = harness.SGD

    class OverflowingSGD(real_sgd):
        calls = 0

        def step(self, lr=None):
            super().step(lr)
            OverflowingSGD.calls += 1
            if OverflowingSGD.calls == 3:
                next(iter(self.params.values())).data[...] = np.inf

    monkeypatch.setattr(harness, "SGD", OverflowingSGD)
    record = harness.train_student_kd(cfg, 4, datasets=datasets)
    assert record.status == "failed"
    assert record.diagnostic["error"] == "non-finite-loss"
    assert (record.diagnostic["epoch"], record.diagnostic["step"]) == (0, 2)
    assert "parameter" in record.diagnostic["message"]
    assert "status=failed" in capsys.readouterr().out


def test_domain_errors_from_overflowed_weights_become_divergence(make_config, datasets, monkeypatch):
    cfg = make_config()
    train, test = datasets
    model = build(cfg.student.model, seed=1)
    trainer = harness.Trainer(model, cfg, epochs=2, seed=1, loss_fn=harness._hard_loss)

    def overflow(train_set, epoch):
        model.named_parameters()["fc0.weight"].data[0, 0] = np.nan
        raise DomainError("weights contain non-finite values")

    monkeypatch.setattr(trainer, "run_epoch", overflow)
    with pytest.raises(NonFiniteLossError, match="non-finite state"):
        trainer.fit(train, test)

    def unrelated(train_set, epoch):
        raise DomainError("bad tau")

    clean = harness.Trainer(build(cfg.student.model, seed=1), cfg, epochs=1, seed=1, loss_fn=harness._hard_loss)
    monkeypatch.setattr(clean, "run_epoch", unrelated)
    with pytest.raises(DomainError, match="bad tau"):
        clean.fit(train, test)


def test_missing_teacher_checkpoint_is_a_config_error(make_config, datasets, tmp_path):
    cfg = make_config(
        teacher={"checkpoint": str(tmp_path / "gone.qkdc")},
        distill={"lambda_policy": {"kind": "constant", "value": 0.5}},
    )
    with pytest.raises(ConfigError, match="teacher checkpoint not found"):
        harness.train_student_kd(cfg, 1, datasets=datasets)


def test_missing_student_init_is_pretrained_first(make_config, datasets, tmp_path, monkeypatch, capsys):
    init = tmp_path / "student_fp.qkdc"
    cfg = make_config(student={"init_checkpoint": str(init)})
    restored = []
    real_restore = harness.restore
    monkeypatch.setattr(harness, "restore", lambda m, c: restored.append(c.metadata["role"]) or real_restore(m, c))

    record = harness.train_student_kd(cfg, 1, datasets=datasets)
    assert record.status == "ok"
    assert ckpt.load(init).metadata["role"] == "student-pretrain"
    assert restored == ["student-pretrain"]
    assert f"role=student-pretrain seed=1 path={init}" in capsys.readouterr().out

    stamp = init.stat().st_mtime_ns
    harness.train_student_kd(cfg, 2, datasets=datasets)
    assert init.stat().st_mtime_ns == stamp
    assert "role=student-pretrain" not in capsys.readouterr().out


def test_default_student_init_is_per_seed_under_out_dir(make_config, datasets, tmp_path):
    cfg = make_config()
    path = harness.student_init_path(cfg, 5)
    assert path.parent == tmp_path / "runs" / "students"
    assert path.name.startswith("student_fp_") and path.name.endswith("_s5.qkdc")
    assert harness.student_init_path(cfg, 5, tmp_path / "elsewhere").parent == tmp_path / "elsewhere" / "students"

    record = harness.train_student_kd(cfg, 5, datasets=datasets)
    assert record.status == "ok"
    assert path.exists()
    assert ckpt.load(path).metadata["seed"] == 5


def test_student_runs_are_deterministic(make_config, datasets, teacher_path):
    cfg = make_config(
        teacher={"checkpoint": str(teacher_path)},
        distill={"lambda_policy": {"kind": "constant", "value": 0.5}, "cache_teacher_logits": True},
    )
    a = harness.train_student_kd(cfg, 2, datasets=datasets)
    b = harness.train_student_kd(cfg, 2, datasets=datasets)
    assert a.epochs == b.epochs
    assert a.final_test_accuracy == b.final_test_accuracy
    assert a.config_hash == b.config_hash


def test_assistant_is_trained_before_the_student(make_config, datasets, teacher_path, tmp_path, capsys):
    ta_path = tmp_path / "ta.qkdc"
    cfg = make_config(
        teacher={
            "checkpoint": str(teacher_path),
            "assistant": {
                "model": {"family": "mlp", "depth": 1, "base_width": 24, "num_classes": 3, "input_shape": [1, 1, 6]},
                "checkpoint": str(ta_path),
                "distill": {"tau": 2.0, "lambda_policy": {"kind": "constant", "value": 0.5}},
                "epochs": 2,
            },
        },
        distill={"lambda_policy": {"kind": "constant", "value": 0.5}},
    )
    record = harness.train_student_kd(cfg, 1, datasets=datasets)
    out = capsys.readouterr().out
    assert ta_path.exists()
    assert ckpt.load(ta_path).metadata["role"] == "assistant"
    assert "[distill] role=assistant" in out
    assert f"teacher={ta_path}" in out
    assert record.status == "ok"


def test_student_checkpoint_holds_quantized_weights(make_config, datasets, tmp_path):
    out = tmp_path / "student.qkdc"
    record = harness.train_student_kd(make_config(), 1, datasets=datasets, out_path=out)
    saved = ckpt.load(out)
    assert saved.metadata["config_hash"] == record.config_hash
    for layer in ("fc0", "head"):
        assert _on_two_bit_grid(saved.params[f"{layer}.weight"])
    assert len(np.unique(saved.params["fc0.bias"])) > 3


def test_run_record_matches_schema(make_config, datasets):
    record = harness.train_student_kd(make_config(), 1, datasets=datasets)
    schema = json.loads((ROOT / "schema" / "run_record.schema.json").read_text(encoding="utf-8"))
    doc = json.loads(json.dumps(record.to_dict()))
    assert list(Draft7Validator(schema).iter_errors(doc)) == []
    again = harness.RunRecord.from_dict(doc)
    assert again.key == (record.config_hash, 1)
    assert again.labels["baseline"] is True


def test_evaluate_reports_accuracy(datasets, make_config):
    cfg = make_config()
    model = build(cfg.student.model, seed=0).eval()
    loss, accuracy = harness.evaluate(model, datasets[1])
    assert 0.0 <= accuracy <= 1.0
    assert loss > 0.0
