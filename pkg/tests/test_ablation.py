import pytest

from apk.ablation import LAMBDAS, METRIC_COLUMNS, PROMPT_ROWS, SUITES, Ablation, strip_attributes
from apk.config import from_dict
from apk.knowledge import ActionKnowledge, ActionTriplet
from apk.pipeline import gen_corpus, gen_knowledge, load_data, train_warmup
from apk.substrate import ConfigError

from test_cli import TINY


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    cfg = from_dict({**TINY, "paths": {"corpus": str(root / "corpus"), "captions": str(root / "captions.jsonl"),
                                       "knowledge": str(root / "k.jsonl"), "llm_cache": str(root / "cache"),
                                       "runs": str(root / "runs")}}, env={})
    gen_corpus(cfg)
    gen_knowledge(cfg)
    data = load_data(cfg)
    _, res = train_warmup(cfg, data, root / "warm")
    return Ablation(cfg, data, res.checkpoint, root / "runs", "test")


def test_prompt_table_layout(ablation):
    t = ablation.suite("prompts")
    assert t.columns == ["Action Triplet", "Hand-Craft Triplet", "Action State", "Vis"] + METRIC_COLUMNS
    assert [r[:4] for r in t.rows] == [["x" if f else "" for f in flags] for flags, _ in PROMPT_ROWS]
    assert all(len(r) == len(t.columns) for r in t.rows)


def test_aim_and_stage_tables(ablation):
    aim = ablation.suite("aim")
    assert [r[0] for r in aim.rows] == ["Baseline", "w/o action knowledge", "w/o attribute knowledge",
                                        "replace AIM with CAT", "Ours"]
    stages = ablation.suite("stages")
    assert [r[0] for r in stages.rows] == ["Baseline", "combined training", "one-stage training",
                                           "two-stage training"]
    # the full model is trained once and shared between tables
    assert aim.rows[-1][1:] == stages.rows[-1][1:]


def test_lambda_grid_and_tsv(ablation):
    t = ablation.suite("lambda")
    assert [r[0] for r in t.rows] == [f"{lam:.1f}" for lam in LAMBDAS]
    lines = t.tsv().splitlines()
    assert lines[0].split("\t") == ["lambda"] + METRIC_COLUMNS and len(lines) == 1 + len(LAMBDAS)
    assert t.pretty().startswith("[lambda]")
    for res in t.results:
        assert res.i2t.r_at[1] <= res.i2t.r_at[5] <= res.i2t.r_at[10]


def test_unknown_suite(ablation):
    assert set(SUITES) == {"prompts", "aim", "stages", "lambda"}
    with pytest.raises(ConfigError):
        ablation.suite("everything")


def test_strip_attributes():
    k = {"c": ActionKnowledge("c", "cap", [ActionTriplet("girl", "is", "small"), ActionTriplet("girl", "push", "box")],
                              ["a", "b"])}
    out, removed = strip_attributes(k)
    assert removed == 1 and [t.action for t in out["c"].triplets] == ["push"] and out["c"].state_descriptions == ["b"]
