import numpy as np
import pytest
import torch

from apk.corpus import build_corpus
from apk.interaction import AimConfig
from apk.knowledge import ActionKnowledge, ActionTriplet
from apk.mini_clip import TextConfig, VisionConfig
from apk.model import ActionPromptModel
from apk.prompts import PromptConfig
from apk.tokenizer import Tokenizer

torch.set_num_threads(1)

WORDS = "a red blue green square circle triangle pushes pulls holds push pull hold the is pushing pulling holding changing its state".split()


def tiny_tokenizer(extra=()):
    texts = [" ".join(WORDS), *extra, PromptConfig().state_template, PromptConfig().handcraft_template]
    return Tokenizer.build(texts, context_length=16, max_size=128)


def tiny_model(dtype=torch.float32, prompts=None, aim=None, seed=0, image_size=16):
    torch.manual_seed(seed)
    m = ActionPromptModel(
        tiny_tokenizer(),
        VisionConfig(image_size=image_size, patch_size=8, width=16, layers=3, heads=2, insert_layer=1),
        TextConfig(vocab_size=128, context_length=16, width=16, layers=2, heads=2),
        prompts or PromptConfig(k_max=3, n_visual=2, n_deep=2, triplet_layers=1, triplet_heads=2),
        aim or AimConfig(heads=2),
    )
    return m.to(dtype)


def knowledge(cid="c0", caption="a red square pushes a blue circle", triplets=(("square", "push", "circle"),)):
    ts = [ActionTriplet(*t) for t in triplets]
    return ActionKnowledge(cid, caption, ts, [f"the {t.subject} is {t.action}ing the {t.object}" for t in ts])


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    build_corpus(d, seed=0)
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
