import json
import math
import struct
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from amodalseg import checkpoint as ckpt
from amodalseg.config import ConfigError, TrainConfig
from amodalseg.diffusion import DiffusionModel
from amodalseg.scenes import SceneConfig, generate_scenes
from amodalseg.train import (LossBreakdown, NumericError, TrainingError, build_ais_model, cache_priors,
                             load_ais_checkpoint, mask_targets, total_loss, train)

CATS = ["circle", "square", "triangle", "ellipse", "bar"]


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(SceneConfig(seed=4), 3)


@pytest.fixture(scope="module")
def diffusion():
    torch.manual_seed(0)
    return DiffusionModel(base_channels=16).eval()


def random_priors(scenes, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {(s.scene_id, i.instance_id): torch.rand(28, 28, generator=g) for s in scenes for i in s.instances}


def fake_predictions(n, visible, occluding, amodal, classes=5):
    vo = SimpleNamespace(class_logits=torch.zeros(n, classes), visible_logits=visible[:, None],
                         occluding_logits=occluding[:, None])
    return vo, SimpleNamespace(amodal_logits=amodal[:, None])


def targets_for(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    masks = [(torch.rand(n, 28, 28, generator=g) > 0.5).float() for _ in range(3)]
    return SimpleNamespace(visible=masks[0], occluding=masks[1], amodal=masks[2],
                           category=torch.zeros(n, dtype=torch.long))


def test_zero_logits_give_log_two():
    t = targets_for(3)
    z = torch.zeros(3, 28, 28)
    lb = total_loss(*fake_predictions(3, z, z, z), t)
    for part in (lb.l_v, lb.l_o, lb.l_a):
        assert float(part) == pytest.approx(math.log(2), abs=1e-6)
    assert float(lb.l_cls) == pytest.approx(math.log(5), abs=1e-6)


def test_saturated_correct_logits_give_near_zero():
    t = targets_for(2, 1)
    logit = {k: 40.0 * getattr(t, k) - 20.0 for k in ("visible", "occluding", "amodal")}
    lb = total_loss(*fake_predictions(2, logit["visible"], logit["occluding"], logit["amodal"]), t)
    for part in (lb.l_v, lb.l_o, lb.l_a):
        assert float(part) < 1e-6


def test_total_is_unit_weighted_sum():
    lb = LossBreakdown(l_cls=torch.tensor(0.25), l_v=torch.tensor(0.25), l_o=torch.tensor(0.25),
                       l_a=torch.tensor(0.25))
    assert float(lb.total) == pytest.approx(1.0)
    assert set(lb.as_floats()) == {"l_det", "l_cls", "l_v", "l_o", "l_a", "total"}


def test_non_finite_loss_is_reported():
    t = targets_for(1)
    z = torch.zeros(1, 28, 28)
    with pytest.raises(NumericError, match="l_a"):
        total_loss(*fake_predictions(1, z, z, torch.full((1, 28, 28), float("nan"))), t)


def _cfg(tmp_path, **kw):
    base = dict(iterations=4, log_interval=2, checkpoint_interval=2, output_dir=str(tmp_path / "run"),
                prior_cache_dir=str(tmp_path / "cache"), T_sample=2)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learning_rate_leaves_weights(tmp_path, scenes, diffusion):
    cfg = _cfg(tmp_path, learning_rate=0.0, iterations=3)
    result = train(cfg, scenes, diffusion, CATS, priors=random_priors(scenes), write_checkpoints=False)
    torch.manual_seed(cfg.seed)
    fresh = build_ais_model(5, cfg)
    for (name, a), b in zip(result.model.state_dict().items(), fresh.state_dict().values()):
        assert torch.equal(a, b), name


def test_training_is_deterministic(tmp_path, scenes, diffusion):
    priors = random_priors(scenes)
    a = train(_cfg(tmp_path / "a"), scenes, diffusion, CATS, priors=priors, write_checkpoints=False)
    b = train(_cfg(tmp_path / "b"), scenes, diffusion, CATS, priors=priors, write_checkpoints=False)
    for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(x, y)
    assert a.log == b.log


@pytest.mark.parametrize("lr", [1e-4, 1e-5])
def test_single_sgd_step_decreases_loss(lr, scenes):
    torch.manual_seed(1)
    model = build_ais_model(5, TrainConfig())
    t = mask_targets(scenes[0])
    prior = random_priors(scenes[:1])
    p = torch.stack([prior[(t.scene_id, i)] for i in t.instance_ids])
    opt = torch.optim.SGD(model.parameters(), lr=lr)

    def loss():
        return total_loss(*model(t.image, t.boxes, p), t).total

    before = loss()
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        assert float(loss()) < float(before)


def test_missing_prior_is_an_error(tmp_path, scenes, diffusion):
    priors = random_priors(scenes)
    priors.pop(next(iter(priors)))
    with pytest.raises(TrainingError, match="missing cached prior"):
        train(_cfg(tmp_path), scenes, diffusion, CATS, priors=priors, write_checkpoints=False)


def test_prior_cache_hits_and_invalidation(tmp_path, scenes, diffusion):
    cfg = _cfg(tmp_path)
    n = sum(len(s.instances) for s in scenes)
    first = cache_priors(diffusion, scenes, cfg)
    assert first["computed"] == n and first["hits"] == 0
    assert len(list((tmp_path / "cache").glob("*.npz"))) == n
    second = cache_priors(diffusion, scenes, cfg)
    assert second["computed"] == 0 and second["hits"] == n
    for key, prior in first["priors"].items():
        assert torch.equal(prior, second["priors"][key])
    third = cache_priors(diffusion, scenes, cfg.replace(tau_exponent=2))
    assert third["computed"] == n
    assert len(list((tmp_path / "cache").glob("*.npz"))) == n


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"b.w": torch.randn(3, 4, generator=g), "a.bias": torch.randn(5, generator=g),
               "s": torch.tensor(1.5)}
    path = tmp_path / "x.aisd"
    ckpt.save_checkpoint(path, tensors, {"kind": "test", "n": 3})
    loaded, meta = ckpt.load_checkpoint(path)
    assert meta == {"kind": "test", "n": 3}
    assert set(loaded) == set(tensors)
    for k, v in tensors.items():
        assert loaded[k].numpy().tobytes() == v.numpy().tobytes()


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "x.aisd"
    ckpt.save_checkpoint(path, {"w": torch.arange(6.0).reshape(2, 3), "v": torch.ones(2)}, {"k": 1})
    data = path.read_bytes()
    assert data[:4] == b"AISD"
    assert struct.unpack("<I", data[4:8])[0] == 1
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    assert header["__metadata__"] == {"k": 1}
    assert header["v"] == {"dtype": "f32", "shape": [2], "byte_offset": 0}
    assert header["w"] == {"dtype": "f32", "shape": [2, 3], "byte_offset": 8}
    body = np.frombuffer(data[16 + hlen:], dtype="<f4")
    assert body.tolist() == [1, 1, 0, 1, 2, 3, 4, 5]


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.aisd"
    bad.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(bad)
    good = tmp_path / "good.aisd"
    ckpt.save_checkpoint(good, {"w": torch.ones(100)}, {})
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ckpt.CheckpointError, match="past end"):
        ckpt.load_checkpoint(good)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(tmp_path / "missing.aisd")


def test_resume_matches_uninterrupted(tmp_path, scenes, diffusion):
    priors = random_priors(scenes)
    full = train(_cfg(tmp_path / "full", iterations=5), scenes, diffusion, CATS, priors=priors)
    part_cfg = _cfg(tmp_path / "part", iterations=5)
    train(part_cfg.replace(iterations=2), scenes, diffusion, CATS, priors=priors)
    resumed = train(part_cfg, scenes, diffusion, CATS, priors=priors,
                    resume=tmp_path / "part" / "run" / "ckpt_000002.aisd")
    for x, y in zip(full.model.state_dict().values(), resumed.model.state_dict().values()):
        assert torch.equal(x, y)


def test_final_checkpoint_contents(tmp_path, scenes, diffusion):
    result = train(_cfg(tmp_path), scenes, diffusion, CATS, priors=random_priors(scenes))
    run = tmp_path / "run"
    assert result.checkpoint_path == run / "model_final.aisd"
    assert (run / "ckpt_000002.aisd").exists() and (run / "ckpt_000004.aisd").exists()
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [2, 4]
    model, diff, meta, _ = load_ais_checkpoint(result.checkpoint_path)
    assert meta["iteration"] == 4 and meta["categories"] == CATS
    assert meta["config"]["T_sample"] == 2
    for x, y in zip(model.state_dict().values(), result.model.state_dict().values()):
        assert torch.equal(x, y)
    for x, y in zip(diff.state_dict().values(), diffusion.state_dict().values()):
        assert torch.equal(x, y)


@pytest.mark.parametrize("field,value", [("learning_rate", -1.0), ("iterations", 0), ("optimizer", "adam"),
                                         ("momentum", 1.0), ("visible_channel_dropout", 1.0)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value}).validate()


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(seed=7, tau_exponent=2)
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nonsense": 1})
