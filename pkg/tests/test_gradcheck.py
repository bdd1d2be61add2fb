import pytest

from phinet_core import objective
from phinet_core.config import ABLATION_ROWS
from phinet_core.gradcheck import inject_fault, parameter_group, parameter_groups, run_gradcheck
from phinet_core.objective import build_model


@pytest.mark.parametrize(
    "name, group",
    [
        ("encoder.blocks.0.attn.q.weight", "encoder.blocks.0"),
        ("encoder.cls_token", "encoder.cls_token"),
        ("encoder.patch_embed.bias", "encoder.patch_embed"),
        ("ca1.blocks.0.ls2", "ca1.blocks.0"),
        ("ca1.latent_embed.weight", "ca1.latent_embed"),
        ("ca3.w_h", "ca3.w_h"),
        ("prior_head.fc2.weight", "prior_head"),
        ("posterior_head.fc1.bias", "posterior_head"),
    ],
)
def test_parameter_group(name, group):
    assert parameter_group(name) == group


def test_groups_cover_every_trainable_parameter(micro_cfg):
    model = build_model(micro_cfg, ABLATION_ROWS["proposed"])
    groups = parameter_groups(model)
    assert sum(len(ps) for ps in groups.values()) == len(list(model.parameters()))
    assert {"prior_head", "posterior_head", "ca3.w_h", "encoder.blocks.0", "ca1.queries"} <= set(groups)


def test_suite_passes():
    report = run_gradcheck(seed=0)
    assert report.passed, report.render()
    names = report.names()
    assert len(names) == len(set(names))
    assert {"objective.sim2", "objective.kl_categorical", "objective.kl_balanced"} <= set(names)
    assert "encoder.blocks.0" in names and "prior_head" in names


def test_suite_passes_with_linear_g():
    report = run_gradcheck(seed=1, flags=ABLATION_ROWS["linear-g"])
    assert report.passed, report.render()
    assert "ca1.w_g" in report.names()


def test_sim2_fault_is_reported():
    original = objective.sim2
    report = run_gradcheck(seed=0, fault="sim2")
    assert not report.passed
    assert report.failures == ["objective.sim2"]
    assert objective.sim2 is original


def test_unknown_fault():
    with pytest.raises(ValueError):
        with inject_fault("kl"):
            pass
