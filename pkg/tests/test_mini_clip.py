import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from apk.mini_clip import LOGIT_SCALE_MAX, MiniCLIP, TextConfig, VisionConfig
from apk.substrate import ConfigError, DimensionError
from apk.tokenizer import SPECIALS, Tokenizer, split_words, truncate_words

from conftest import WORDS, tiny_tokenizer

word_lists = st.lists(st.sampled_from(WORDS + [",", "."]), min_size=0, max_size=40)


def test_vocab_starts_with_specials_and_is_sorted():
    tok = Tokenizer.build(["b a", "c, a"])
    assert tok.tokens == list(SPECIALS) + [",", "a", "b", "c"]


def test_encode_layout_and_unknown():
    tok = Tokenizer.build(["red square"], context_length=6)
    ids = tok.encode("Red hexagon")
    assert ids == [tok.bos_id, tok.index["red"], tok.unk_id, tok.eos_id, tok.pad_id, tok.pad_id]
    assert tok.decode(ids) == "red <unk>"


def test_vocab_limit():
    with pytest.raises(ValueError):
        Tokenizer.build(["a b c d e"], max_size=6)


def test_save_load_round_trip(tmp_path):
    tok = tiny_tokenizer()
    tok.save(tmp_path / "v.txt")
    again = Tokenizer.load(tmp_path / "v.txt", tok.context_length)
    assert again.tokens == tok.tokens


@settings(max_examples=60, deadline=None)
@given(word_lists, st.integers(1, 20))
def test_truncate_fits_budget_and_is_prefix(words, budget):
    text = " ".join(words)
    cut = truncate_words(text, budget)
    assert len(split_words(cut)) <= budget
    assert text.startswith(cut)


@settings(max_examples=60, deadline=None)
@given(word_lists)
def test_encode_always_fixed_length_with_one_eos(words):
    tok = tiny_tokenizer()
    ids = tok.encode(" ".join(words))
    assert len(ids) == tok.context_length and ids.count(tok.eos_id) == 1 and ids[0] == tok.bos_id


def _clip(seed=0):
    torch.manual_seed(seed)
    return MiniCLIP(VisionConfig(image_size=16, patch_size=8, width=16, layers=2, heads=2, insert_layer=1),
                    TextConfig(vocab_size=128, context_length=16, width=16, layers=2, heads=2),
                    tiny_tokenizer())


def test_features_are_unit_norm_and_shaped():
    clip = _clip()
    z_i = clip.encode_image_plain(torch.rand(3, 16, 16, 3))
    z_t = clip.encode_texts(["a red square", "a blue circle"])
    assert z_i.shape == (3, 16) and z_t.shape == (2, 16)
    assert torch.allclose(z_i.norm(dim=-1), torch.ones(3), atol=1e-6)
    assert torch.allclose(z_t.norm(dim=-1), torch.ones(2), atol=1e-6)


def test_patchify_orders_patches_row_major():
    clip = _clip()
    img = torch.zeros(16, 16, 3)
    img[8:, :8] = 1.0  # bottom-left patch
    patches = clip.visual.patchify(img)
    assert patches.shape == (4, 8 * 8 * 3)
    assert [float(p.sum()) for p in patches] == [0.0, 0.0, 192.0, 0.0]


def test_text_pooling_ignores_tokens_after_eos():
    clip = _clip()
    ids = clip.tokenize(["a red square"])
    eos = int((ids[0] == clip.tokenizer.eos_id).nonzero()[0])
    noisy = ids.clone()
    noisy[0, eos + 1:] = clip.tokenizer.index["circle"]
    assert torch.allclose(clip.encode_text(ids), clip.encode_text(noisy), atol=1e-6)


def test_temperature_initial_and_clamped():
    clip = _clip()
    assert math.isclose(float(clip.scale.detach()), 1 / 0.07, rel_tol=1e-6)
    with torch.no_grad():
        clip.logit_scale.fill_(20.0)
    assert float(clip.scale.detach()) == LOGIT_SCALE_MAX


def test_config_errors():
    with pytest.raises(ConfigError):
        VisionConfig(image_size=30, patch_size=8).validate()
    with pytest.raises(ConfigError):
        VisionConfig(insert_layer=6, layers=6).validate()
    with pytest.raises(ConfigError):
        TextConfig(width=10, heads=4).validate()
    with pytest.raises(ConfigError):
        MiniCLIP(VisionConfig(), TextConfig(vocab_size=8), tiny_tokenizer())


def test_input_errors():
    clip = _clip()
    with pytest.raises(DimensionError):
        clip.encode_image_plain(torch.rand(2, 32, 32, 3))
    with pytest.raises(ValueError):
        clip.encode_text(torch.full((1, 16), 500))
    with pytest.raises(ValueError):
        clip.text.embed_words(torch.zeros(1, 17, dtype=torch.long))


def test_same_seed_same_weights():
    a, b = _clip(3), _clip(3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
