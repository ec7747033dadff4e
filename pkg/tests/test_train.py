import json
import math
from dataclasses import replace

import numpy as np
import pytest

from crat.autodiff import SGD, Tensor, cross_entropy, kl_divergence
from crat.data import generate_synthetic
from crat.errors import ArgumentError, CheckpointError, TrainingDiverged
from crat.model import ModelBundle, ModelConfig
from crat.train import (
    TrainConfig,
    Trainer,
    crat_loss,
    distill_phase2,
    model_config_for,
    phase1_loss,
    phase2_loss,
    rotation_accuracy,
    train_phase1,
    write_log,
)

WIDTHS = (8, 16)


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic(12, 10, 16, np.random.default_rng(0))


def small(**kw):
    base = dict(epochs=2, batch_size=8, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def ce_oracle(logits, y):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def kl_oracle(student, teacher):
    def logsm(z):
        z = np.asarray(z, dtype=np.float64)
        z = z - z.max(1, keepdims=True)
        return z - np.log(np.exp(z).sum(1, keepdims=True))

    ls, lt = logsm(student), logsm(teacher)
    return (np.exp(lt) * (lt - ls)).sum(1).mean()


def rand_logits(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32), requires_grad=True)


# -- losses ------------------------------------------------------------


def test_crat_loss_uniform_and_perfect():
    assert crat_loss(Tensor(np.zeros((4, 16))), [0, 5, 9, 15]).item() == pytest.approx(math.log(16), abs=1e-5)
    perfect = np.full((3, 16), -60.0)
    perfect[np.arange(3), [1, 2, 3]] = 60.0
    assert crat_loss(Tensor(perfect), [1, 2, 3]).item() < 1e-30


def test_crat_loss_matches_direct_formula():
    z = rand_logits((12, 16), 0)
    y = np.random.default_rng(1).integers(0, 16, 12)
    assert crat_loss(z, y).item() == pytest.approx(ce_oracle(z.data, y), abs=1e-6)


def test_phase1_lambda_zero_is_supervised_loss_exactly():
    s, c = rand_logits((6, 8), 2), rand_logits((6, 16), 3)
    y, yr = np.arange(6) % 8, np.arange(6) % 16
    assert phase1_loss(s, y, c, yr, 0.0).item() == cross_entropy(s, y).item()


def test_phase1_uniform_both_heads():
    out = phase1_loss(Tensor(np.zeros((5, 8))), np.arange(5), Tensor(np.zeros((5, 16))), np.arange(5), 1.0)
    assert out.item() == pytest.approx(math.log(8) + math.log(16), abs=1e-5)


def test_phase1_is_linear_in_lambda():
    s, c = rand_logits((7, 8), 4), rand_logits((7, 16), 5)
    y, yr = np.arange(7) % 8, (3 * np.arange(7)) % 16
    want = ce_oracle(s.data, y) + 2 * ce_oracle(c.data, yr)
    assert phase1_loss(s, y, c, yr, 2.0).item() == pytest.approx(want, abs=1e-5)


def test_phase2_composition():
    s, c, t = rand_logits((9, 8), 6), rand_logits((9, 16), 7), rand_logits((9, 8), 8)
    y, yr = np.arange(9) % 8, np.arange(9) % 16
    want = 0.5 * (ce_oracle(s.data, y) + ce_oracle(c.data, yr)) + 1.0 * kl_oracle(s.data, t.data)
    assert phase2_loss(s, c, t.data, y, yr, 0.5, 1.0, 1.0).item() == pytest.approx(want, abs=1e-5)


def test_phase2_beta_zero_reduces_to_scaled_phase1():
    s, c, t = rand_logits((9, 8), 6), rand_logits((9, 16), 7), rand_logits((9, 8), 8)
    y, yr = np.arange(9) % 8, np.arange(9) % 16
    p1 = phase1_loss(s, y, c, yr, 1.0).item()
    assert phase2_loss(s, c, t, y, yr, 0.5, 0.0, 1.0).item() == pytest.approx(0.5 * p1, abs=1e-6)
    assert phase2_loss(s, c, t, y, yr, 1.0, 0.0, 1.0).item() == p1


def test_phase2_teacher_equal_student():
    s, c = rand_logits((9, 8), 9), rand_logits((9, 16), 10)
    y, yr = np.arange(9) % 8, np.arange(9) % 16
    assert kl_divergence(s, s.data).item() <= 1e-9
    p1 = phase1_loss(s, y, c, yr, 1.0).item()
    assert phase2_loss(s, c, s.data, y, yr, 0.5, 1.0, 1.0).item() == pytest.approx(0.5 * p1, abs=1e-6)


def test_per_term_gradients_sum_to_total(ds):
    model = ModelBundle(model_config_for(small(), ds, WIDTHS), seed=0)
    teacher = ModelBundle(model.config, seed=7)
    trainer = Trainer(small(), ds, model=model, widths=WIDTHS)
    batch = trainer.batch(0, 0)
    t_logits = teacher.forward_sup(teacher.forward_features(batch.images, "batch")).data

    def grads(alpha, beta, lam):
        for p in model.params.values():
            p.grad = None
        f = model.forward_features(batch.images, "batch")
        loss = phase2_loss(model.forward_sup(f), model.forward_comp(f), t_logits, batch.sup_labels, batch.rot_labels, alpha, beta, lam)
        loss.backward()
        return {k: np.asarray(p.grad, dtype=np.float64) for k, p in model.extractor_params().items()}

    total = grads(0.5, 1.0, 1.0)
    sup, aux, kl = grads(0.5, 0.0, 0.0), grads(0.0, 0.0, 0.0), grads(0.0, 1.0, 0.0)
    aux_only = grads(0.5, 0.0, 1.0)  # sup + aux, aux isolated by difference
    for k in total:
        assert not aux[k].any()  # alpha=0 and beta=0 leave nothing
        scale = np.abs(total[k]).max()
        np.testing.assert_allclose(sup[k] + (aux_only[k] - sup[k]) + kl[k], total[k], atol=1e-5 * scale)
        assert np.abs(aux_only[k] - sup[k]).max() > 0 and np.abs(kl[k]).max() > 0


# -- config ------------------------------------------------------------


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.lam, cfg.alpha, cfg.beta, cfg.replication, cfg.distill_generations) == (1.0, 0.5, 1.0, 5, 1)
    assert TrainConfig(family="rot1024").replication == 1 and TrainConfig(family="Rot4").replication == 4
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in (dict(lam=-1), dict(beta=-0.1), dict(epochs=0), dict(m=17), dict(family=None, m=2), dict(family="Rot7")):
        with pytest.raises(ArgumentError):
            TrainConfig(**bad)


def test_lr_schedule():
    cfg = TrainConfig(epochs=30)
    assert cfg.lr_at(0) == cfg.lr_at(21) == 0.05
    assert cfg.lr_at(22) == pytest.approx(0.005) and cfg.lr_at(29) == pytest.approx(0.005)


# -- training loop -----------------------------------------------------


def test_lambda_zero_matches_supervised_only_loop(ds):
    cfg = small(lam=0.0, epochs=1)
    trainer = Trainer(cfg, ds, widths=WIDTHS).run()

    # independent loop: same batches, no rotation head in the graph or optimizer
    ref = ModelBundle(model_config_for(cfg, ds, WIDTHS), cfg.seed)
    params = {k: v for k, v in ref.params.items() if not k.startswith("comp.")}
    opt = SGD(params, cfg.lr_at(0), cfg.momentum, cfg.weight_decay)
    losses = []
    for step in range(trainer.steps_per_epoch):
        b = trainer.batch(0, step)
        loss = cross_entropy(ref.forward_sup(ref.forward_features(Tensor(b.images), "train")), b.sup_labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert trainer.step_losses == losses
    for k, p in params.items():
        assert np.array_equal(trainer.model.params[k].data, p.data), k


def test_training_is_deterministic(ds):
    a = Trainer(small(), ds, widths=WIDTHS).run()
    b = Trainer(small(), ds, widths=WIDTHS).run()
    assert a.step_losses == b.step_losses and a.log == b.log
    c = Trainer(small(seed=2), ds, widths=WIDTHS).run(max_steps=3)
    assert c.step_losses != a.step_losses[:3]


def test_epoch_log_records(ds, tmp_path):
    trainer = Trainer(small(), ds, widths=WIDTHS).run()
    assert [r["epoch"] for r in trainer.log] == [0, 1]
    rec = trainer.log[0]
    assert set(rec) == {"epoch", "sup_loss", "aux_loss", "kl_loss", "sup_acc", "rot_acc", "lr"}
    assert rec["kl_loss"] == 0 and rec["aux_loss"] > 0 and 0 <= rec["rot_acc"] <= 1
    write_log(trainer.log, tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == trainer.log


def test_batches_are_fixed_by_position(ds):
    t = Trainer(small(), ds, widths=WIDTHS)
    a, b = t.batch(1, 3), t.batch(1, 3)
    assert a.images.tobytes() == b.images.tobytes()
    assert len(a) == 8 * 5
    order0 = np.concatenate([t.batch(0, s).source[::5] for s in range(t.steps_per_epoch)])
    assert len(set(order0.tolist())) == len(order0)  # no source repeats within an epoch
    assert set(order0.tolist()) <= set(ds.indices("base").tolist())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_last_good_checkpoint(ds):
    trainer = Trainer(small(epochs=3), ds, widths=WIDTHS)
    trainer.run(max_steps=trainer.steps_per_epoch)
    trainer.config = replace(trainer.config, lr=1e30)
    with pytest.raises(TrainingDiverged) as err:
        trainer.run()
    good = err.value.last_good
    assert good is not None and good.rng_state["epoch"] == 1 and good.rng_state["step"] == 0
    assert all(np.all(np.isfinite(p.data)) for p in good.model.params.values())


def test_train_phase1_returns_tagged_checkpoint(ds):
    ck = train_phase1(small(epochs=1), ds, widths=WIDTHS)
    assert ck.phase == "phase1" and ck.rng_state["epoch"] == 1
    assert len(ck.extra["log"]) == 1


# -- phase 2 -----------------------------------------------------------


def test_teacher_equal_to_student_init_gives_alpha_times_phase1(ds):
    cfg = small()
    student = ModelBundle(model_config_for(cfg, ds, WIDTHS), cfg.seed)
    teacher = student.copy()
    parts = Trainer(cfg, ds, model=student, teacher=teacher, widths=WIDTHS).train_step()
    assert parts["kl_loss"] <= 1e-9
    assert parts["loss"] == pytest.approx(cfg.alpha * (parts["sup_loss"] + cfg.lam * parts["aux_loss"]), abs=1e-6)


def test_fresh_student_sees_nonzero_kl(ds):
    cfg = small(epochs=1)
    teacher = train_phase1(cfg, ds, widths=WIDTHS)
    student = ModelBundle(teacher.model.config, seed=5)
    parts = Trainer(cfg, ds, model=student, teacher=teacher.model).train_step()
    assert parts["kl_loss"] > 1e-3


def test_beta_zero_alpha_one_generation_is_a_phase1_run(ds):
    cfg = small(epochs=1)
    teacher = train_phase1(small(epochs=1, seed=9), ds, widths=WIDTHS)
    student, logs = distill_phase2(replace(cfg, alpha=1.0, beta=0.0), ds, teacher)
    plain = train_phase1(cfg, ds, widths=WIDTHS)
    assert student.phase == "phase2-gen1" and len(logs) == 1
    for k, p in plain.model.params.items():
        assert np.array_equal(student.model.params[k].data, p.data), k
    assert [r["sup_loss"] for r in logs[0]] == [r["sup_loss"] for r in plain.extra["log"]]


def test_generations_chain(ds):
    cfg = small(epochs=1, distill_generations=2)
    teacher = train_phase1(cfg, ds, widths=WIDTHS)
    student, logs = distill_phase2(cfg, ds, teacher)
    assert student.phase == "phase2-gen2" and len(logs) == 2
    assert all(rec["kl_loss"] > 0 for log in logs for rec in log)


def test_teacher_architecture_mismatch(ds):
    cfg = small(epochs=1)
    other = ModelBundle(ModelConfig(image_size=16, widths=(8, 8), family="VS16"))
    with pytest.raises(CheckpointError):
        Trainer(cfg, ds, teacher=other, widths=WIDTHS)


def test_rotation_accuracy_range(ds):
    model = ModelBundle(model_config_for(small(family="Rot4"), ds, WIDTHS), 0)
    acc = rotation_accuracy(model, ds, "Rot4")
    assert 0 <= acc <= 1
