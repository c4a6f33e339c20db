import math

import numpy as np
import pytest

from remoh_lab.errors import ConfigurationError, TrainingDiverged
from remoh_lab.model import ModelConfig, build_model
from remoh_lab.training import (
    RMSProp,
    Telemetry,
    TrainConfig,
    clip_global_norm,
    train,
)
from remoh_lab.tensor import Tensor


def small_model(man, seed=0, **kw):
    cfg = dict(vocab_size=len(man.vocabulary()), heads=4, shared=1, active=2, tokens_per_concept=2,
               encoder_layers=2, lora_rank=2)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed)


def test_zero_epochs_leaves_model_unchanged(small_manifest):
    m = small_model(small_manifest)
    before = m.snapshot()
    _, tel = train(m, small_manifest, TrainConfig(stage1_epochs=0, stage2_epochs=0))
    assert len(tel) == 0
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_same_seed_same_result(small_manifest):
    runs = []
    for _ in range(2):
        m = small_model(small_manifest)
        _, tel = train(m, small_manifest, TrainConfig(max_steps=4, seed=5))
        runs.append((m.snapshot(), tel.to_jsonl()))
    assert runs[0][1] == runs[1][1]
    assert all(runs[0][0][k].tobytes() == runs[1][0][k].tobytes() for k in runs[0][0])


def test_stage_one_keeps_encoder_frozen(small_manifest):
    m = small_model(small_manifest)
    enc = {n: t.data.copy() for n, t in m.named("encoder")}
    tok = m.params["slots"].data.copy()
    train(m, small_manifest, TrainConfig(stage2_epochs=0, max_steps=2))
    assert all(np.array_equal(enc[n], t.data) for n, t in m.named("encoder"))
    assert not np.array_equal(tok, m.params["slots"].data)


def test_telemetry_fields_and_round_trip(small_manifest, tmp_path):
    m = small_model(small_manifest)
    _, tel = train(m, small_manifest, TrainConfig(max_steps=3), telemetry_path=tmp_path / "t.jsonl")
    assert [r["step"] for r in tel.records] == [0, 1, 2]
    r = tel.records[-1]
    assert set(r) >= {"lm", "spr", "hae", "total", "beta", "R_s", "T_s", "grad_norm", "stage"}
    assert r["T_s"] == pytest.approx(1 / 3)
    assert math.isclose(r["total"], r["lm"] + r["spr"] + r["hae"])
    back = Telemetry.read(tmp_path / "t.jsonl")
    assert back.records == tel.records
    assert tel.tail_activation() == 1 - r["R_s"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_huge_learning_rate_diverges(small_manifest):
    m = small_model(small_manifest)
    with pytest.raises(TrainingDiverged) as e:
        train(m, small_manifest, TrainConfig(lr_scale=1e306, max_steps=50))
    assert e.value.last_finite_step is None or e.value.last_finite_step >= 0


def test_vocab_mismatch_rejected(small_manifest):
    m = build_model(ModelConfig(vocab_size=10), 0)
    with pytest.raises(ConfigurationError):
        train(m, small_manifest, TrainConfig(max_steps=1))


def test_config_validation_and_schedule():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_tokens=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    c = TrainConfig()
    assert c.group_lr("tokens", 0.0) == pytest.approx(1e-4 * 300)
    assert c.group_lr("remoh", 1.0) == pytest.approx(1e-5 * 300 * 0.05)
    assert c.group_lr("lora", 0.5) == pytest.approx(1e-5 * 300 * 0.525)


def test_clip_global_norm():
    g, n = clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert n == 5.0 and np.allclose([g[0][0], g[1][0]], [0.6, 0.8])
    g, n = clip_global_norm([np.array([0.3])], 1.0)
    assert g[0][0] == 0.3


def test_rmsprop_first_step_is_normalised():
    t = Tensor(np.array([1.0, 1.0]), True)
    opt = RMSProp(rho=0.99, eps=0.0)
    opt.step([("w", t, 0.1)], [np.array([2.0, -0.5])])
    # first step: v = 0.01 g^2, update = lr g / (0.1 |g|) = lr * 10 * sign(g)
    assert np.allclose(t.data, [0.0, 2.0])
