"""Acceptance criteria, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line that pytest prints in its
terminal summary. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import contextlib
import math
import time
from unittest import mock

import numpy as np
import pytest
import torch

from apk.ablation import LAMBDAS, METRIC_COLUMNS, Ablation
from apk.config import from_dict
from apk.corpus import load_truth
from apk.interaction import AdaptiveInteraction, AimConfig
from apk.knowledge import ActionKnowledge, ActionTriplet, parse_triplet_line
from apk.llm import MockBackend
from apk.mini_clip import TextConfig, VisionConfig
from apk.model import GROUPS, ActionPromptModel, group_of
from apk.pipeline import FULL, NO_KNOWLEDGE, gen_corpus, gen_knowledge, load_data, train_warmup
from apk.prompts import PromptConfig
from apk.retrieval import KS, RerankConfig, RetrievalIndex, ranks_from_scores, recall_at
from apk.substrate import grad_check, grad_check_module, group_digests
from apk.training import STAGE_GROUPS, StagePlan, TripletLossConfig, contrastive_loss, run_stage, triplet_loss

from conftest import ACCEPTANCE, knowledge, tiny_model, tiny_tokenizer

E2E_BUDGET_S = 15 * 60
GRAD_BUDGET_S = 60
GRAD_TOL = 1e-4
GRAD_STEP = 3e-5


@contextlib.contextmanager
def criterion(name):
    """Record PASS/FAIL for one criterion; ``info`` collects the measured numbers."""
    info = {}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE.append(f"FAIL  {name}  {_fmt(info)}  ({type(exc).__name__}: {str(exc).splitlines()[0][:120]})")
        raise
    ACCEPTANCE.append(f"PASS  {name}  {_fmt(info)}")


def _fmt(info):
    return ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())


# ------------------------------------------------------------ gradients

def _grad_model():
    torch.manual_seed(0)
    m = ActionPromptModel(
        tiny_tokenizer(),
        VisionConfig(image_size=16, patch_size=8, width=8, layers=2, heads=2, insert_layer=1),
        TextConfig(vocab_size=128, context_length=16, width=8, layers=1, heads=2),
        PromptConfig(k_max=2, n_visual=2, n_deep=2, triplet_layers=1, triplet_heads=2, bottleneck=2),
        AimConfig(heads=2),
    ).double()
    return m


def _relu_margin(forward):
    """Smallest nonzero |pre-activation| seen by torch.relu during ``forward``.

    Exact zeros are masked padding rows, which no parameter moves."""
    seen = []
    relu = torch.relu

    def spy(x):
        live = x.detach().abs()
        seen.append(float(live[live > 0].min()))
        return relu(x)

    with mock.patch.object(torch, "relu", spy):
        forward()
    assert seen
    return min(seen)


def test_gradient_suite():
    with criterion("gradient suite: central differences on every trainable path") as info:
        t0 = time.time()
        m = _grad_model()
        recs = [knowledge(triplets=[("square", "push", "circle"), ("circle", "hold", "square")]),
                knowledge(), knowledge(triplets=[("circle", "pull", "square")])]
        inp = m.knowledge_inputs(recs)
        e0 = m.patch_embed(torch.rand(3, 16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(2)))
        text = m.encode_texts(["a red square", "a blue circle", "a green triangle"]).detach()
        e0 = e0.detach()
        # central differences straddling a ReLU corner are meaningless, so the probe
        # point must keep every live pre-activation well clear of zero
        info["relu_margin"] = _relu_margin(lambda: m.encode_image_prompted(e0, inp))
        assert info["relu_margin"] > 10 * GRAD_STEP

        def loss():
            return contrastive_loss(m.encode_image_prompted(e0, inp), text, scale=m.clip.scale)

        paths = ("triplet_encoder", "adapter", "aim", "deep_prompts", "visual_prompts", "temperature")
        names = [n for n, _ in m.named_parameters() if group_of(n) in paths]
        assert {group_of(n) for n in names} == set(paths)
        # 3e-5 sits at the bottom of the error curve: 1e-4 already shows step^2 truncation
        # on the triplet-encoder biases, and 1e-5 is dominated by rounding
        errs = grad_check_module(m, loss, names, step=GRAD_STEP)

        g = torch.Generator().manual_seed(1)
        z_i = torch.nn.functional.normalize(torch.randn(4, 6, generator=g, dtype=torch.float64), dim=-1)
        z_t = torch.nn.functional.normalize(torch.randn(4, 6, generator=g, dtype=torch.float64), dim=-1)
        errs["loss:contrastive/image"] = grad_check(lambda v: contrastive_loss(v, z_t, tau=0.1), z_i)
        errs["loss:contrastive/text"] = grad_check(lambda v: contrastive_loss(z_i, v, tau=0.1), z_t)
        # probe points at least 0.1 away from the hinge, where the derivative is undefined
        d = torch.tensor([0.5, 0.1, 0.2, 0.9], dtype=torch.float64)
        errs["loss:triplet"] = grad_check(lambda v: triplet_loss(v[:2], v[2:]).sum() + triplet_loss(v[2:], v[:2]).sum(), d)

        worst = max(errs, key=errs.get)
        info.update(checked=len(errs), worst=errs[worst], at=worst, seconds=time.time() - t0)
        assert errs[worst] < GRAD_TOL, f"{worst}: {errs[worst]:.3g}"
        assert info["seconds"] < GRAD_BUDGET_S


# ------------------------------------------------------------ freeze contracts

@pytest.fixture(scope="module")
def small_split(tmp_path_factory):
    from apk.corpus import build_corpus, load_split

    d = tmp_path_factory.mktemp("freeze")
    build_corpus(d, {"train": 16, "val": 0, "test": 0}, seed=5, image_size=16)
    split = load_split(d, "train", 16)
    truth = load_truth(d)
    know = {}
    for cid, cap in zip(split.caption_ids, split.captions):
        t = ActionTriplet(*truth[cid])
        know[cid] = ActionKnowledge(cid, cap, [t], [f"the {t.subject} is {t.action}ing the {t.object}"])
    return split, know


def test_freeze_contracts(small_split, tmp_path):
    with criterion("freeze contracts: stage 1 and stage 2 leave frozen groups bit-identical") as info:
        split, know = small_split
        model = tiny_model()
        d0 = group_digests(model.param_groups())
        plan = lambda s: StagePlan.default(s, epochs=2, batch_size=8, optimizer="adam", lr=1e-2)
        run_stage(plan("stage1"), model, split, know, None, tmp_path)
        d1 = group_digests(model.param_groups())
        run_stage(plan("stage2"), model, split, know, None, tmp_path, seed=1)
        d2 = group_digests(model.param_groups())
        backbone = ("vision_backbone", "text_encoder", "word_embeddings")
        after1 = ("triplet_encoder", "adapter", "visual_prompts", "deep_prompts")
        info.update(stage1_frozen_equal=all(d0[g] == d1[g] for g in backbone),
                    stage2_frozen_equal=all(d1[g] == d2[g] for g in set(GROUPS) - {"aim"}))
        assert info["stage1_frozen_equal"] and info["stage2_frozen_equal"]
        assert all(d1[g] == d2[g] for g in after1)
        assert d1["aim"] != d2["aim"] and any(d0[g] != d1[g] for g in STAGE_GROUPS["stage1"])


# ------------------------------------------------------------ fusion endpoints

def test_fusion_endpoints():
    with criterion("fusion: lambda endpoints and combined row sums") as info:
        torch.manual_seed(0)
        aim = AdaptiveInteraction(16, AimConfig(heads=2)).double().requires_grad_(False)
        g = torch.Generator().manual_seed(0)
        e0, pt, ps = (torch.randn(2, 5, 16, generator=g, dtype=torch.float64),
                      torch.randn(2, 3, 16, generator=g, dtype=torch.float64),
                      torch.randn(2, 3, 16, generator=g, dtype=torch.float64))
        mt = torch.tensor([[True, True, False], [True, False, False]])
        ms = torch.tensor([[True, True, True], [True, True, False]])
        v_t, a_t = aim.self_attend(aim.informed(e0, pt, mt))
        v_s, a_s = aim.self_attend(aim.informed(e0, ps, ms))
        v = aim.fusion(v_t, v_s)
        one, _ = aim(e0, pt, ps, mt, ms, lam=1.0)
        zero, _ = aim(e0, pt, ps, mt, ms, lam=0.0)
        info["lam1_err"] = float((one - a_t @ v).abs().max())
        info["lam0_err"] = float((zero - a_s @ v).abs().max())
        dev = 0.0
        for lam in (0.0, 0.3, 0.7, 1.0):
            _, tr = aim(e0, pt, ps, mt, ms, lam=lam)
            dev = max(dev, float((tr.A_combined.sum(-1) - 1).abs().max()))
        info["row_sum_dev"] = dev
        assert info["lam1_err"] <= 1e-12 and info["lam0_err"] <= 1e-12 and dev <= 1e-6


# ------------------------------------------------------------ loss identities

def test_loss_identities():
    with criterion("loss identities: 2 ln B and triplet table") as info:
        worst = 0.0
        for b in (2, 8, 32):
            z = torch.nn.functional.normalize(torch.ones(b, 8, dtype=torch.float64), dim=-1)
            worst = max(worst, abs(contrastive_loss(z, z).item() - 2 * math.log(b)))
        info["max_dev_2lnB"] = worst
        cfg = TripletLossConfig(margin=0.2)
        cases = {(0.2, 0.9): 0.0, (0.5, 0.4): 0.3}
        got = {k: triplet_loss(*k, cfg) for k in cases}
        info["triplet"] = got
        assert worst <= 1e-9 and got == cases


# ------------------------------------------------------------ metric oracle

def _brute(scores, correct, k):
    return sum(int(np.sum(row > max(row[j] for j in ok)) < k) for row, ok in zip(scores, correct)) / len(scores)


def test_metric_oracle():
    with criterion("metric oracle: R@K equals brute-force rank counting on 50 matrices") as info:
        mismatches = 0
        for trial in range(50):
            rng = np.random.default_rng(1000 + trial)
            g = int(rng.integers(1, 101))
            owner = np.concatenate([np.arange(g), rng.integers(0, g, int(rng.integers(0, g + 1)))])
            scores = rng.standard_normal((g, len(owner)))
            img_ok = [set(np.flatnonzero(owner == i).tolist()) for i in range(g)]
            cap_ok = [{int(o)} for o in owner]
            i2t = recall_at(ranks_from_scores(torch.from_numpy(scores), img_ok))
            t2i = recall_at(ranks_from_scores(torch.from_numpy(scores.T.copy()), cap_ok))
            for k in KS:
                mismatches += i2t[k] != _brute(scores, img_ok, k)
                mismatches += t2i[k] != _brute(scores.T, cap_ok, k)
            assert i2t[1] <= i2t[5] <= i2t[10] and t2i[1] <= t2i[5] <= t2i[10]
        info["mismatches"] = mismatches
        assert mismatches == 0


# ------------------------------------------------------------ no-op re-ranking

def test_no_op_rerank(small_split):
    with criterion("no-op re-ranking: order unchanged, prompted == plain features") as info:
        split, know = small_split
        m = tiny_model(torch.float64, PromptConfig(triplet="off", state=False, visual=False, k_max=3,
                                                   triplet_layers=1, triplet_heads=2),
                       AimConfig(heads=2, enabled=False))
        index = RetrievalIndex(m, split, know, RerankConfig(k=10, enrichment="none"))
        base_i2t, base_t2i = index.base_orders()
        info["i2t_equal"] = index.rank_i2t() == base_i2t
        info["t2i_equal"] = index.rank_t2i() == base_t2i
        imgs = torch.from_numpy(split.images)
        plain = m.encode_image_plain(imgs)
        prompted = m.encode_image_prompted(m.patch_embed(imgs), m.knowledge_inputs(list(know.values())))
        info["feature_dev"] = float((plain - prompted).detach().abs().max())
        assert info["i2t_equal"] and info["t2i_equal"] and info["feature_dev"] <= 1e-6


# ------------------------------------------------------------ end to end

def _cfg(root, **train):
    return from_dict({"paths": {"corpus": str(root / "corpus"), "captions": str(root / "captions.jsonl"),
                                "knowledge": str(root / "knowledge.jsonl"), "llm_cache": str(root / "llm-cache"),
                                "runs": str(root / "runs")},
                      "train": train}, env={})


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    torch.set_num_threads(1)
    cfg = _cfg(root)
    t0 = time.time()
    gen_corpus(cfg)
    first = gen_knowledge(cfg, backend=MockBackend())
    data = load_data(cfg)
    _, warm = train_warmup(cfg, data, root / "runs")
    ab = Ablation(cfg, data, warm.checkpoint, root / "runs", "test")
    results = {"warmup": ab.baseline(), "two-stage": ab.run(FULL)}
    pipeline_s = time.time() - t0
    results["w/o action knowledge"] = ab.run(NO_KNOWLEDGE)
    results["one-stage"] = ab.run(FULL, "one-stage")
    return {"root": root, "cfg": cfg, "data": data, "warm": warm.checkpoint, "first": first,
            "results": results, "pipeline_s": pipeline_s, "total_s": time.time() - t0}


def test_knowledge_pipeline(e2e):
    with criterion("knowledge pipeline: valid triplets, cache hits, byte-identical sidecars") as info:
        root, cfg, first = e2e["root"], e2e["cfg"], e2e["first"]
        backend = MockBackend()
        second = gen_knowledge(cfg, out=root / "knowledge-2.jsonl", backend=backend)
        truth = load_truth(root / "corpus")
        know = e2e["data"].knowledge
        valid = sum(all(parse_triplet_line(t.render()) == t for t in rec.triplets) and len(rec.triplets) > 0
                    for rec in know.values())
        agree = sum([t.as_list() for t in rec.triplets] == [truth[cid]] for cid, rec in know.items())
        info.update(captions=first.captions, valid=valid, agree=agree, second_hits=second.cache_hits,
                    second_calls=backend.calls)
        identical = (root / "knowledge.jsonl").read_bytes() == (root / "knowledge-2.jsonl").read_bytes()
        info["identical"] = identical
        assert first.captions == 384 and first.failures == 0
        assert valid == agree == 384
        assert second.cache_hits == 384 and backend.calls == 0 and identical


def test_end_to_end(e2e):
    with criterion("end-to-end toy run: R@1, Rsum ordering, runtime") as info:
        r = e2e["results"]
        for name, res in r.items():
            info[name] = round(res.rsum, 1)
        info["i2t_R@1"] = r["two-stage"].i2t.r_at[1]
        info["pipeline_s"] = round(e2e["pipeline_s"], 1)
        info["total_s"] = round(e2e["total_s"], 1)
        for res in r.values():
            for rep in (res.i2t, res.t2i, res.base_i2t, res.base_t2i):
                assert rep.r_at[1] <= rep.r_at[5] <= rep.r_at[10]
        assert e2e["total_s"] < E2E_BUDGET_S
        assert r["two-stage"].i2t.r_at[1] >= 3 / 64
        assert r["two-stage"].rsum > r["warmup"].rsum
        assert r["two-stage"].rsum > r["w/o action knowledge"].rsum


def test_two_stage_beats_one_stage(e2e):
    with criterion("schedule ordering: two-stage Rsum > one-stage Rsum") as info:
        r = e2e["results"]
        info.update(two_stage=round(r["two-stage"].rsum, 1), one_stage=round(r["one-stage"].rsum, 1))
        assert r["two-stage"].rsum > r["one-stage"].rsum


# ------------------------------------------------------------ ablation harness

def test_ablation_harness(e2e, tmp_path):
    with criterion("ablation harness: table layouts and lambda suite end to end") as info:
        # lambda suite on the full corpus with a reduced budget (2 + 2 epochs per variant)
        short = {"stage1": {"epochs": 2}, "stage2": {"epochs": 2}}
        cfg = _cfg(e2e["root"], **short)
        ab = Ablation(cfg, e2e["data"], e2e["warm"], tmp_path, "test")
        t0 = time.time()
        lam = ab.suite("lambda")
        info["lambda_s"] = round(time.time() - t0, 1)
        info["lambda_rsum"] = "/".join(r[-1] for r in lam.rows)
        assert lam.columns == ["lambda"] + METRIC_COLUMNS
        assert [r[0] for r in lam.rows] == [f"{x:.1f}" for x in LAMBDAS] == ["0.1", "0.3", "0.5", "0.7", "0.9"]
        for res in lam.results:
            assert res.i2t.r_at[1] <= res.i2t.r_at[5] <= res.i2t.r_at[10]
        assert len({res.config["lam"] for res in lam.results}) == len(LAMBDAS)

        # the other three tables, at tiny scale
        tiny = _tiny_ablation(tmp_path / "tiny")
        prompts, aim, stages = (tiny.suite(s) for s in ("prompts", "aim", "stages"))
        assert prompts.columns[:4] == ["Action Triplet", "Hand-Craft Triplet", "Action State", "Vis"]
        assert len(prompts.rows) == 5
        assert [r[0] for r in aim.rows] == ["Baseline", "w/o action knowledge", "w/o attribute knowledge",
                                            "replace AIM with CAT", "Ours"]
        assert [r[0] for r in stages.rows] == ["Baseline", "combined training", "one-stage training",
                                               "two-stage training"]
        info["tables"] = "prompts/aim/stages/lambda"


def _tiny_ablation(root):
    from test_cli import TINY

    cfg = from_dict({**TINY, "paths": {"corpus": str(root / "corpus"), "captions": str(root / "c.jsonl"),
                                       "knowledge": str(root / "k.jsonl"), "llm_cache": str(root / "cache"),
                                       "runs": str(root / "runs")}}, env={})
    gen_corpus(cfg)
    gen_knowledge(cfg)
    data = load_data(cfg)
    _, res = train_warmup(cfg, data, root / "warm")
    return Ablation(cfg, data, res.checkpoint, root / "runs", "test")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
