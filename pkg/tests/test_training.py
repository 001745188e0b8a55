import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apk.corpus import load_split, load_truth
from apk.knowledge import ActionKnowledge, ActionTriplet, ValidationError
from apk.model import GROUPS
from apk.substrate import ConfigError, NumericError, group_digests
from apk.training import (
    STAGE_GROUPS,
    Schedule,
    StagePlan,
    TripletLossConfig,
    augment_images,
    contrastive_loss,
    hardest_negatives,
    run_stage,
    triplet_loss,
)

from conftest import tiny_model


@pytest.mark.parametrize("b", [2, 8, 32])
def test_uniform_similarity_contrastive_loss_is_two_log_b(b):
    z = torch.nn.functional.normalize(torch.ones(b, 8, dtype=torch.float64), dim=-1)
    assert abs(contrastive_loss(z, z.clone()).item() - 2 * math.log(b)) <= 1e-9


@pytest.mark.parametrize("d_p, d_n, expected", [(0.2, 0.9, 0.0), (0.5, 0.4, 0.3)])
def test_triplet_loss_cases_exact(d_p, d_n, expected):
    assert triplet_loss(d_p, d_n, TripletLossConfig(margin=0.2)) == expected
    t = triplet_loss(torch.tensor(d_p, dtype=torch.float64), torch.tensor(d_n, dtype=torch.float64))
    assert t.item() == expected


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2), st.floats(0.01, 1))
def test_triplet_loss_is_hinge(d_p, d_n, margin):
    v = triplet_loss(d_p, d_n, TripletLossConfig(margin=margin))
    assert v >= 0 and (v == 0) == (d_p - d_n + margin <= 0)


def test_contrastive_loss_input_checks():
    with pytest.raises(ValidationError):
        contrastive_loss(torch.zeros(1, 4), torch.zeros(1, 4))
    with pytest.raises(ValidationError):
        contrastive_loss(torch.zeros(2, 4), torch.zeros(3, 4))


def test_contrastive_loss_prefers_aligned_pairs():
    z = torch.eye(4, dtype=torch.float64)
    assert contrastive_loss(z, z) < contrastive_loss(z, z.flip(0))


def test_hardest_negative_skips_positives():
    sim = torch.tensor([[0.9, 0.8, 0.1], [0.2, 0.3, 0.7]])
    pos = torch.tensor([[True, False, False], [False, False, True]])
    assert hardest_negatives(sim, pos).tolist() == [1, 1]


def test_stage_plan_contracts():
    assert StagePlan.default("stage2").trainable_groups == {"aim"}
    assert StagePlan.default("stage1").frozen_groups == {"vision_backbone", "text_encoder", "word_embeddings"}
    with pytest.raises(ConfigError):
        StagePlan("stage2", {"aim", "adapter"}, "triplet").validate()
    StagePlan("stage2", {"aim", "adapter"}, "triplet").validate(strict=False)
    with pytest.raises(ConfigError):
        StagePlan.default("stage3")
    with pytest.raises(ConfigError):
        StagePlan.default("stage1", batch_size=1).validate()


def test_stage_plan_defaults_follow_reference_recipe():
    # SGD, initial lr 1e-5, at most 4 epochs, batch 128; the toy run overrides these in the config
    p = StagePlan.default("stage1")
    assert (p.optimizer, p.lr, p.epochs, p.batch_size) == ("sgd", 1e-5, 4, 128)
    assert TripletLossConfig().margin == 0.2


def test_schedule_variants_share_budget():
    s = Schedule()
    one = s.one_stage()
    assert one.epochs == s.stage1.epochs + s.stage2.epochs and one.loss == "contrastive"
    assert s.combined().loss == "combined"
    assert STAGE_GROUPS["stage2"] < STAGE_GROUPS["stage1"]


def test_augment_shifts_without_mirroring():
    img = torch.zeros(1, 8, 8, 3)
    img[0, 2, 1] = 1.0
    out = augment_images(img, torch.Generator().manual_seed(0), max_shift=2)
    assert out.shape == img.shape
    assert torch.equal(augment_images(img, torch.Generator(), max_shift=0), img)


# ------------------------------------------------------------------ stages

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    from apk.corpus import build_corpus

    d = tmp_path_factory.mktemp("train_corpus")
    build_corpus(d, {"train": 12, "val": 6, "test": 0}, seed=1, image_size=16)
    truth = load_truth(d)
    splits = {s: load_split(d, s, 16) for s in ("train", "val")}
    know = {}
    for sp in splits.values():
        for cid, cap in zip(sp.caption_ids, sp.captions):
            t = ActionTriplet(*truth[cid])
            know[cid] = ActionKnowledge(cid, cap, [t], [f"the {t.subject} is {t.action}ing the {t.object}"])
    return splits["train"], splits["val"], know


def _plan(stage, **kw):
    return StagePlan.default(stage, epochs=1, batch_size=4, optimizer="adam", lr=1e-2, **kw)


@pytest.mark.parametrize("stage", ["stage1", "stage2"])
def test_freeze_contract_exact(stage, tiny_data, tmp_path):
    train, val, know = tiny_data
    model = tiny_model()
    before = group_digests(model.param_groups())
    res = run_stage(_plan(stage), model, train, know, None, tmp_path)
    after = group_digests(model.param_groups())
    frozen = set(GROUPS) - STAGE_GROUPS[stage]
    assert all(before[g] == after[g] for g in frozen)
    assert any(before[g] != after[g] for g in STAGE_GROUPS[stage])
    assert res.checkpoint.exists()


def test_best_epoch_is_restored(tiny_data, tmp_path):
    train, val, know = tiny_data
    model = tiny_model()
    res = run_stage(_plan("stage1", conditioning="own"), model, train, know, val, tmp_path)
    assert res.best_epoch in (0, 1)
    assert [r["epoch"] for r in res.log.records if r.get("step") == "val"] == [0, 1]


def test_missing_knowledge_is_reported(tiny_data):
    train, _, know = tiny_data
    partial = dict(list(know.items())[1:])
    with pytest.raises(ValidationError):
        run_stage(_plan("stage1"), tiny_model(), train, partial)


def test_non_finite_loss_dumps_state(tiny_data, tmp_path):
    train, _, know = tiny_data
    model = tiny_model()
    with torch.no_grad():
        model.prompts.visual.fill_(float("nan"))
    with pytest.raises(NumericError):
        run_stage(_plan("stage1"), model, train, know, None, tmp_path)
    assert (tmp_path / "stage1-nonfinite.ckpt").exists()
