import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from apk.config import RunConfig, dump_config, env_name, from_dict, leaf_paths, load_config, to_dict
from apk.substrate import ConfigError


def test_defaults():
    cfg = load_config(env={})
    assert cfg.aim.lam == 0.7 and cfg.rerank.k == 20
    assert cfg.corpus.counts == {"train": 256, "val": 64, "test": 64}
    assert cfg.train.stage1.optimizer == "adam" and cfg.train.warmup0.lr == 1e-4
    assert cfg.vision.width == cfg.text.width


@pytest.mark.parametrize("data, message", [
    ({"aim": {"lam": 1.5}}, "aim.lam must lie in [0, 1], got 1.5"),
    ({"aim": {"lamb": 0.5}}, "unknown key 'aim.lamb'"),
    ({"aim": {"heads": "four"}}, "aim.heads must be an integer"),
    ({"prompts": {"visual": "yes"}}, "prompts.visual must be a boolean"),
    ({"vision": {"width": 32}}, "vision.width and text.width must be equal"),
    ({"seed": -1}, "seed must lie in"),
    ({"llm": {"backend": "magic"}}, "llm.backend must be"),
    ({"aim": 3}, "aim must be a mapping"),
])
def test_invalid_configs_name_the_key(data, message):
    with pytest.raises(ConfigError) as exc:
        from_dict(data, env={})
    assert message in str(exc.value)


def test_off_stays_a_string(tmp_path):
    (tmp_path / "c.yaml").write_text("prompts:\n  triplet: off\n  state: false\n")
    cfg = load_config(tmp_path / "c.yaml", env={})
    assert cfg.prompts.triplet == "off" and cfg.prompts.state is False


def test_missing_and_broken_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml", env={})
    (tmp_path / "bad.yaml").write_text("aim: [unclosed\n")
    with pytest.raises(ConfigError, match="not valid YAML"):
        load_config(tmp_path / "bad.yaml", env={})


def test_env_overrides_file(tmp_path):
    (tmp_path / "c.yaml").write_text("aim:\n  lam: 0.3\n")
    cfg = load_config(tmp_path / "c.yaml", env={"APK_AIM_LAM": "0.9", "APK_PROMPTS_TRIPLET": "off",
                                                 "APK_UNRELATED": "x", "HOME": "/"})
    assert cfg.aim.lam == 0.9 and cfg.prompts.triplet == "off"
    text = dump_config(cfg)
    assert "lam: 0.9  # env APK_AIM_LAM" in text
    with pytest.raises(ConfigError, match="APK_AIM_HEADS"):
        load_config(env={"APK_AIM_HEADS": "many"})


def test_env_names_cover_every_leaf():
    names = [env_name(p) for p in leaf_paths(RunConfig())]
    assert len(names) == len(set(names)) and "APK_TRAIN_STAGE2_EPOCHS" in names


def test_dump_round_trips(tmp_path):
    cfg = from_dict({"aim": {"lam": 0.3}, "prompts": {"triplet": "off"}, "train": {"stage1": {"epochs": 2}}}, env={})
    text = dump_config(cfg)
    assert "# default; override with APK_RERANK_K" in text
    (tmp_path / "d.yaml").write_text(text)
    assert to_dict(load_config(tmp_path / "d.yaml", env={})) == to_dict(cfg)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(1, 64), st.sampled_from(["learned", "handcraft", "off"]))
def test_round_trip_property(lam, k, triplet):
    cfg = from_dict({"aim": {"lam": lam}, "rerank": {"k": k}, "prompts": {"triplet": triplet}}, env={})
    again = from_dict(yaml.safe_load(yaml.safe_dump(to_dict(cfg))), env={})
    assert to_dict(again) == to_dict(cfg)


def test_stage_settings_build_plans():
    cfg = from_dict({"train": {"stage2": {"epochs": 3}}}, env={})
    sched = cfg.train.schedule()
    assert sched.stage2.epochs == 3 and sched.stage2.trainable_groups == {"aim"}
    assert sched.one_stage().epochs == cfg.train.stage1.epochs + 3
