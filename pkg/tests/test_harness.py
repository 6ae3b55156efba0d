import numpy as np
import pytest

from fxdl import harness
from fxdl.config import ConfigError, RunConfig


def test_presets_differ_only_in_studied_fields():
    base = RunConfig()
    for name in harness.PRESET_NAMES:
        members = harness.ablation_presets(name, base, seeds=(0,))
        assert len(members) >= 2
        labels = [lab for lab, _ in members]
        assert len(set(labels)) == len(labels)
        dicts = [cfg.to_dict() for _, cfg in members]
        varying = {(s, k) for d in dicts for s, v in d.items() if isinstance(v, dict)
                   for k in v if any(e[s][k] != v[k] for e in dicts)}
        varying |= {s for d in dicts for s, v in d.items() if not isinstance(v, dict)
                    and any(e[s] != v for e in dicts)}
        sections = {v if isinstance(v, str) else v[0] for v in varying}
        assert sections <= {"stage1", "stage2", "cache"}, (name, varying)


def test_presets_repeat_over_seeds():
    members = harness.ablation_presets("guidance", seeds=(0, 1, 2))
    assert [cfg.seed for _, cfg in members] == [0, 0, 1, 1, 2, 2]


def test_unknown_preset():
    with pytest.raises(ConfigError):
        harness.ablation_presets("nope")


def test_effective_nfe_for_configs():
    cfg = RunConfig()
    from fxdl.denoiser import SegmentSpec
    assert harness.nfe_for(cfg, None, False) == 2.0
    assert harness.nfe_for(cfg, SegmentSpec(3, 4), True) == pytest.approx(1.75)
    assert harness.nfe_for(cfg, SegmentSpec(3, 4), False) == 2.0


def test_small_pipeline_is_bitwise_reproducible(tmp_path, tiny_dict, fresh_memo):
    tiny_dict.update(cache={"enabled": True, "train": True, "k": 1, "profile_batch": 32})
    cfg = RunConfig.from_dict(tiny_dict)
    outs = []
    for run in ("a", "b"):
        harness.clear_memo()
        res = harness.run_pipeline(cfg, tmp_path / run)
        outs.append(res)
    for name in ("teacher.csv", "stage1.csv", "stage2.csv", "eval.csv", "teacher.ckpt", "stage2_generator.ckpt",
                 "compensator.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert outs[0].nfe == pytest.approx(1.75)
    assert np.isfinite(outs[0].report.mmd2)


def test_memo_reuses_teacher(tiny_dict, fresh_memo):
    cfg = RunConfig.from_dict(tiny_dict)
    assert harness.get_teacher(cfg) is harness.get_teacher(cfg.replace(**{"stage1.alpha": 1.0}))
    assert harness.get_teacher(cfg) is not harness.get_teacher(cfg.replace(seed=1))


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUT_ENV, str(tmp_path / "env"))
    assert harness.output_dir(RunConfig()) == tmp_path / "env"
    assert (tmp_path / "env").is_dir()


def test_load_params_mismatch(small_model):
    with pytest.raises(ConfigError):
        harness.load_params(small_model.params, {})
    arrays = {k: np.zeros((1,), np.float32) for k in small_model.params}
    with pytest.raises(ConfigError):
        harness.load_params(small_model.params, arrays)
