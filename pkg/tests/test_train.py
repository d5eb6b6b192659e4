import json
import math

import numpy as np
import pytest
import torch

from loraflow.augment import AugmentConfig
from loraflow.checkpoint import Checkpoint
from loraflow.dataset import SampleRecord, generate_synthetic
from loraflow.exceptions import FormatError, ParameterError, ShapeError, TruncationError
from loraflow.flow import FlowEndpoints, FlowState
from loraflow.model import ModelConfig, ModelOutput
from loraflow.modem import LoRaParams, modulate_symbol
from loraflow.spectral import default_scales, huber
from loraflow.train import (
    LossBreakdown, LossWeights, TrainConfig, classification_loss, desk_batch_size, from_checkpoint,
    init_model, make_optimizer, run_phase, synthetic_batch, to_checkpoint, total_loss, train_step,
)

TINY = ModelConfig(width=8, depth=1, heads=2, sf_max=5)


def tiny_cfg(**kw):
    base = dict(sf_set=(5,), directions=("up", "down"), batch_sizes={5: 8}, updates=4, lr=1e-3, warmup=2)
    base.update(kw)
    return TrainConfig(**base)


def params_of(ckpt):
    return {k: v.copy() for k, v in ckpt.params.items()}


def test_desk_batch_sizes():
    assert [desk_batch_size(s) for s in (7, 8, 9, 10)] == [64, 32, 16, 8]
    assert desk_batch_size(5) == 256
    assert TrainConfig().batch_size(7) == 64


def test_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(phase="pretrain")
    with pytest.raises(ParameterError):
        TrainConfig(batch_sizes={7: 0})
    with pytest.raises(ParameterError):
        LossWeights(lambda1=-1)


def test_warmup_schedule():
    cfg = TrainConfig(lr=1e-4, warmup=500)
    assert cfg.lr_at(0) == pytest.approx(2e-7)
    assert cfg.lr_at(249) == pytest.approx(5e-5)
    assert cfg.lr_at(499) == cfg.lr_at(10_000) == 1e-4
    assert TrainConfig(warmup=0).lr_at(0) == 1e-4


def test_classification_loss_zero_logits():
    expected = math.log(128) + 1e-4 * math.log(128) ** 2
    assert float(classification_loss(torch.zeros(128, dtype=torch.float64), 5, 1e-4)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(4.8520 + 0.002355, abs=1e-4)


def test_classification_loss_limits():
    logits = torch.full((4, 16), -50.0, dtype=torch.float64)
    labels = torch.tensor([0, 3, 7, 15])
    logits[torch.arange(4), labels] = 50.0
    assert float(classification_loss(logits, labels, 0.0)) < 1e-12
    rng = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 16, generator=rng, dtype=torch.float64)
    labels = torch.arange(6)
    ce = torch.nn.functional.cross_entropy(logits, labels)
    assert float(classification_loss(logits, labels, 0.0)) == pytest.approx(float(ce), rel=1e-12)
    with pytest.raises(ParameterError):
        classification_loss(torch.zeros(16), 16)


def endpoints_for(labels, sf=5, seed=0):
    p = LoRaParams(sf)
    g = torch.Generator().manual_seed(seed)
    z1 = torch.from_numpy(modulate_symbol(p, np.asarray(labels)))
    n = z1.shape[-1]
    z0 = torch.complex(torch.randn(len(labels), n, generator=g, dtype=torch.float64),
                       torch.randn(len(labels), n, generator=g, dtype=torch.float64)) / math.sqrt(2)
    return p, FlowEndpoints(z0, z1)


def test_total_loss_oracle_prediction():
    labels = [1, 9, 30]
    p, e = endpoints_for(labels)
    t = torch.tensor([0.1, 0.5, 0.9], dtype=torch.float64)
    x_t = t[:, None] * e.z1 + (1 - t[:, None]) * e.z0
    logits = torch.full((3, 32), -40.0, dtype=torch.float64)
    logits[torch.arange(3), torch.tensor(labels)] = 0.0  # logsumexp ~ 0 keeps the z-loss quiet
    out = ModelOutput(e.z1 - e.z0, logits)
    losses = total_loss(FlowState(x_t, t), e, out, torch.tensor(labels), p, LossWeights())
    assert float(losses.recon) < 1e-24
    assert float(losses.fft) < 1e-24 and float(losses.stft) < 1e-24
    assert float(losses.cls) <= 1e-6
    assert float(losses.total) == pytest.approx(0.05 * float(losses.cls), abs=1e-15)


def test_total_loss_zero_velocity_at_t0():
    labels = [4, 20]
    p, e = endpoints_for(labels, seed=1)
    t = torch.zeros(2, dtype=torch.float64)
    out = ModelOutput(torch.zeros_like(e.z0), None)
    w = LossWeights(0.1, 0.2, 0.05, 1e-4)
    losses = total_loss(FlowState(e.z0, t), e, out, torch.tensor(labels), p, w)

    z0, z1 = e.z0.numpy(), e.z1.numpy()
    assert float(losses.recon) == pytest.approx(np.mean(np.abs(z1 - z0) ** 2), rel=1e-12)
    ref = np.conj(modulate_symbol(p, 0))
    d = np.fft.fft(z0 * ref) - np.fft.fft(z1 * ref)
    d = np.abs(np.concatenate([d.real.ravel(), d.imag.ravel()]))
    fft_expected = np.mean(np.where(d <= 1, 0.5 * d**2, d - 0.5))
    assert float(losses.fft) == pytest.approx(fft_expected, rel=1e-10)
    assert float(losses.stft) > 0
    assert float(losses.cls) == 0.0
    assert float(losses.total) == pytest.approx(
        float(losses.recon) + 0.1 * float(losses.fft) + 0.2 * float(losses.stft), rel=1e-12)


def test_breakdown_identity_random():
    rng = np.random.default_rng(0)
    for i in range(20):
        labels = rng.integers(0, 32, 3)
        p, e = endpoints_for(labels, seed=i)
        t = torch.from_numpy(rng.uniform(0, 1, 3))
        v = torch.from_numpy(rng.standard_normal((3, 32)) + 1j * rng.standard_normal((3, 32)))
        logits = torch.from_numpy(rng.standard_normal((3, 32)))
        x_t = t[:, None] * e.z1 + (1 - t[:, None]) * e.z0
        w = LossWeights(*rng.uniform(0, 1, 4))
        b = total_loss(FlowState(x_t, t), e, ModelOutput(v, logits), torch.from_numpy(labels), p, w)
        rebuilt = b.recon + w.lambda1 * b.fft + w.lambda2 * b.stft + w.lambda3 * b.cls
        assert abs(float(b.total) - float(rebuilt)) < 1e-12
        assert all(v >= 0 for v in b.as_floats().values())


def test_total_loss_shape_error():
    p, e = endpoints_for([1, 2])
    with pytest.raises(ShapeError):
        total_loss(FlowState(e.z0, 0.0), e, ModelOutput(torch.zeros(2, 16, dtype=torch.complex128), None),
                   torch.tensor([1, 2]), p)


def test_total_loss_batch_permutation_invariant():
    torch.manual_seed(0)
    model = init_model(TINY, 0).double()
    labels = torch.tensor([1, 5, 9, 30])
    p, e = endpoints_for(labels.numpy(), seed=3)
    t = torch.tensor([0.1, 0.4, 0.6, 0.95], dtype=torch.float64)
    x_t = t[:, None] * e.z1 + (1 - t[:, None]) * e.z0

    def loss(idx):
        out = model(x_t[idx], t[idx], train_mode=True)
        return total_loss(FlowState(x_t[idx], t[idx]), FlowEndpoints(e.z0[idx], e.z1[idx]),
                          out, labels[idx], p).total.item()

    perm = torch.tensor([2, 0, 3, 1])
    assert loss(perm) == pytest.approx(loss(torch.arange(4)), rel=1e-12)


def test_synthetic_batch_shapes_and_determinism():
    cfg = tiny_cfg()
    a, b = synthetic_batch(cfg, 3), synthetic_batch(cfg, 3)
    assert a.z1.shape == (8, 32) and a.cond.shape == (8, 8)
    assert torch.equal(a.z1, b.z1) and torch.equal(a.labels, b.labels) and torch.equal(a.cond, b.cond)
    assert not torch.equal(a.z1, synthetic_batch(cfg, 4).z1)


def test_train_step_deterministic():
    cfg = tiny_cfg(updates=10)
    a, b = run_phase(cfg, TINY), run_phase(cfg, TINY)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_zero_lr_leaves_params():
    cfg = tiny_cfg(lr=0.0, updates=3)
    init = to_checkpoint(init_model(TINY, cfg.seed), None, 0, cfg.seed)
    after = run_phase(cfg, TINY)
    for k in init.params:
        np.testing.assert_array_equal(init.params[k], after.params[k])


def test_zero_updates_equals_init(tmp_path):
    cfg = tiny_cfg(updates=0, seed=5)
    run_phase(cfg, TINY, out_path=tmp_path / "a.ckpt")
    to_checkpoint(init_model(TINY, 5), None, 0, 5).save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_smoke_training_reduces_loss():
    cfg = TrainConfig(sf_set=(5,), directions=("up",), batch_sizes={5: 32}, updates=200, lr=1e-3, warmup=20)
    history = []
    run_phase(cfg, ModelConfig(width=8, depth=1, heads=2, sf_max=5),
              callback=lambda step, losses, batch: history.append(losses.total.item()))
    assert np.mean(history[-50:]) < np.mean(history[:50])


def test_resume_reproduces_trajectory(tmp_path):
    full = run_phase(tiny_cfg(updates=6), TINY)
    half = run_phase(tiny_cfg(updates=3), TINY, out_path=tmp_path / "h.ckpt")
    resumed = run_phase(tiny_cfg(updates=3), TINY, init=Checkpoint.load(tmp_path / "h.ckpt"))
    assert half.step == 3 and resumed.step == 6
    for k in full.params:
        np.testing.assert_array_equal(full.params[k], resumed.params[k])
    for k in full.optimizer:
        np.testing.assert_array_equal(full.optimizer[k]["exp_avg_sq"], resumed.optimizer[k]["exp_avg_sq"])


def test_periodic_checkpoint_and_log(tmp_path):
    run_phase(tiny_cfg(updates=4, checkpoint_every=2), TINY, out_path=tmp_path / "c.ckpt",
              log_path=tmp_path / "log.jsonl")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert set(records[0]) == {"step", "recon", "fft", "stft", "cls", "total", "lr"}
    assert records[0]["lr"] == pytest.approx(5e-4)
    assert Checkpoint.load(tmp_path / "c.ckpt").step == 4


def test_every_parameter_moves():
    init = to_checkpoint(init_model(TINY, 0), None, 0, 0)

    def frozen_after(updates):
        cfg = tiny_cfg(updates=updates, warmup=0, augment=AugmentConfig(dropout_prob=0.0))
        after = run_phase(cfg, TINY)
        return {k for k in init.params if np.array_equal(init.params[k], after.params[k])}

    # zero-initialized modulation hides the mapping network from the first gradient
    assert frozen_after(1) == {k for k in init.params if k.startswith("mapping.")}
    assert frozen_after(2) == set()


def test_classifier_only_learns_from_cls():
    cfg = tiny_cfg(updates=3, weights=LossWeights(0.1, 0.1, 0.0, 1e-4))
    init = to_checkpoint(init_model(TINY, 0), None, 0, 0)
    after = run_phase(cfg, TINY)
    for k in init.params:
        same = np.array_equal(init.params[k], after.params[k])
        assert same == k.startswith("classifier."), k


def test_nonfinite_loss_aborts():
    model = init_model(TINY, 0)
    cfg = tiny_cfg()
    batch = synthetic_batch(cfg, 0)
    batch.z1[0, 0] = complex(float("inf"), 0)
    with pytest.raises(Exception) as exc:
        train_step(batch, model, make_optimizer(model, cfg), cfg, 0)
    assert "non-finite" in str(exc.value)


def real_set():
    p = LoRaParams(5)
    return [SampleRecord(modulate_symbol(p, m), m, 5, "up", "real") for m in range(32)]


def test_finetune_uses_mixture():
    synth_ckpt = run_phase(tiny_cfg(updates=1, directions=("up",)), TINY)
    n_real, n_total = [], []
    cfg = tiny_cfg(phase="finetune", updates=40, directions=("up",), batch_sizes={5: 64})
    out = run_phase(cfg, TINY, synth=generate_synthetic({5}, directions=("up",)), real=real_set(),
                    init=synth_ckpt, callback=lambda s, l, b: (n_real.append(b.n_real), n_total.append(len(b.labels))))
    assert out.step == 41
    frac = sum(n_real) / sum(n_total)
    assert frac == pytest.approx(0.95, abs=4 * math.sqrt(0.95 * 0.05 / sum(n_total)))


def test_finetune_requires_sources():
    cfg = tiny_cfg(phase="finetune")
    ck = run_phase(tiny_cfg(updates=0), TINY)
    synth = generate_synthetic({5})
    with pytest.raises(ParameterError):
        run_phase(cfg, TINY, synth=synth, real=real_set())
    with pytest.raises(ParameterError):
        run_phase(cfg, TINY, synth=synth, init=ck)
    with pytest.raises(ParameterError):
        run_phase(cfg, TINY, real=real_set(), init=ck)


def test_checkpoint_round_trip(tmp_path):
    ck = run_phase(tiny_cfg(updates=2), TINY)
    ck.extra = {"note": "x"}
    ck.save(tmp_path / "r.ckpt")
    back = Checkpoint.load(tmp_path / "r.ckpt")
    assert back.model_config == TINY and back.step == 2 and back.extra == {"note": "x"}
    assert back.params.keys() == ck.params.keys()
    for k in ck.params:
        np.testing.assert_array_equal(back.params[k], ck.params[k])
    for k in ck.optimizer:
        assert back.optimizer[k]["step"] == ck.optimizer[k]["step"]
    model, _ = from_checkpoint(back)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v.numpy(), ck.params[k])


def test_checkpoint_layout(tmp_path):
    path = to_checkpoint(init_model(TINY, 0), None, 0, 0).save(tmp_path / "l.ckpt")
    raw = path.read_bytes()
    assert raw[:8] == b"LRFLOWCK"
    version, hlen = np.frombuffer(raw[8:16], dtype="<u4")
    assert version == 1
    header = json.loads(raw[16:16 + hlen])
    entry = header["tensors"][0]
    data = np.frombuffer(raw[16 + hlen + entry["offset"]:][:entry["nbytes"]], dtype="<f4")
    assert data.size == np.prod(entry["shape"])


def test_checkpoint_errors(tmp_path):
    path = to_checkpoint(init_model(TINY, 0), None, 0, 0).save(tmp_path / "e.ckpt")
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-100])
    with pytest.raises(TruncationError):
        Checkpoint.load(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError):
        Checkpoint.load(tmp_path / "m.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (7).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError):
        Checkpoint.load(tmp_path / "v.ckpt")


def test_loss_breakdown_floats():
    b = LossBreakdown(*(torch.tensor(float(i), requires_grad=True) for i in range(5)))
    assert b.as_floats() == {"recon": 0.0, "fft": 1.0, "stft": 2.0, "cls": 3.0, "total": 4.0}
