import numpy as np
import pytest
import torch
from PIL import Image

from amodalseg.ablation import TABLE_ORDER, AblationSpec, ordering_checks, prior_difference
from amodalseg.config import ConfigError
from amodalseg.diffusion import DiffusionModel
from amodalseg.model import AISModel
from amodalseg.pipeline import predict_scenes
from amodalseg.plotting import PANELS, ablation_figure, eval_figure, roi_panels, save_roi_panels
from amodalseg.scenes import SceneConfig, generate_scenes


def _report(aps):
    return {"rows": [{"use_category_condition": c, "use_occluding_condition": o, "median_ap": ap,
                      "runs": [{"ap": ap}]} for (c, o), ap in zip(TABLE_ORDER, aps)]}


def test_table_order_matches_row_pattern():
    assert TABLE_ORDER == ((False, False), (True, False), (False, True), (True, True))


def test_ordering_checks():
    ok = ordering_checks(_report([0.30, 0.33, 0.34, 0.36]))
    assert all(ok[k] for k in ("both_ge_category", "both_ge_occluding", "category_ge_none",
                               "occluding_ge_none", "gap_ok"))
    assert ok["both_minus_none"] == pytest.approx(0.06)
    bad = ordering_checks(_report([0.30, 0.29, 0.34, 0.305]))
    assert not bad["category_ge_none"] and not bad["both_ge_occluding"] and not bad["gap_ok"]
    assert ordering_checks({"rows": _report([0.1] * 4)["rows"][:3]}) == {}


def test_spec_parsing():
    spec = AblationSpec.from_dict({"toggles": [{"use_category_condition": True,
                                                "use_occluding_condition": False}], "seeds": [1, 2]})
    assert spec.toggles == [(True, False)] and spec.seeds == [1, 2]
    assert AblationSpec().toggles == list(TABLE_ORDER)
    for bad in ({"seeds": []}, {"T_sample": [0]}, {"tau_exponent": [-1]}, {"what": 1}):
        with pytest.raises(ConfigError):
            AblationSpec.from_dict(bad)


@pytest.fixture(scope="module")
def predictions():
    torch.manual_seed(0)
    scenes = generate_scenes(SceneConfig(seed=9), 2)
    model = AISModel(num_classes=5, feature_channels=16)
    diffusion = DiffusionModel(base_channels=16).eval()
    return scenes, predict_scenes(model, diffusion, scenes, T_sample=2)


def test_prior_difference_of_identical_lists_is_zero(predictions):
    _, preds = predictions
    assert prior_difference(preds, preds) == 0.0


def test_roi_panels_and_files(predictions, tmp_path):
    scenes, preds = predictions
    by_id = {s.scene_id: s for s in scenes}
    pred = preds[0]
    panels = roi_panels(by_id[pred.scene_id], pred)
    assert tuple(panels) == PANELS
    assert panels["input"].shape == (28, 28, 3)
    for name in PANELS[1:]:
        assert panels[name].shape == (28, 28)
        assert panels[name].min() >= 0 and panels[name].max() <= 1 + 1e-6
    paths = save_roi_panels(by_id[pred.scene_id], pred, tmp_path, upscale=56)
    assert [p.name for p in paths] == [f"{pred.scene_id}_{pred.instance_id}_{n}.png" for n in PANELS]
    img = Image.open(paths[3])
    assert img.mode == "RGB" and img.size == (56, 56)


def test_report_figures(tmp_path):
    rep = {"ap": 0.4, "ar": 0.5, "instances": [
        {"visible_copy_iou": 0.5, "amodal_iou": 0.8, "occlusion_ratio": 0.3}]}
    assert eval_figure(rep, tmp_path / "e.png").exists()
    assert ablation_figure(_report([0.3, 0.3, 0.3, 0.3]), tmp_path / "a.png").exists()
    assert np.asarray(Image.open(tmp_path / "a.png")).ndim == 3
