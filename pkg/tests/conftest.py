import numpy as np
import pytest

from madapt.backbone import ModelConfig, init_params
from madapt.corpus import gen_language_pool, gen_language_spec, synthesize_corpus
from madapt.meta import EpisodeConfig
from madapt.objectives import Batch

SMOKE = ModelConfig(input_dim=8, downsample_stride=2, hidden_dim=4, num_layers=2, num_codebook_layers=1,
                    codebook_size=16, supervised_layer=1, num_languages=3, num_phones=8)

SMALL = ModelConfig(input_dim=8, downsample_stride=2, hidden_dim=8, num_layers=3, num_codebook_layers=1,
                    codebook_size=8, supervised_layer=2, num_languages=3, num_phones=10)

FAST_EPISODE = EpisodeConfig(inner_steps=6, outer_steps=3, inner_warmup_steps=2, head_warmup_steps=2,
                             outer_lr_peak=1e-3, tau=10.0)


@pytest.fixture
def smoke_config():
    return SMOKE


@pytest.fixture
def smoke_params():
    return init_params(SMOKE, 0)


@pytest.fixture
def smoke_batch():
    rng = np.random.default_rng(3)
    t = 8
    frames = rng.standard_normal((t, SMOKE.input_dim))
    labels = rng.integers(0, SMOKE.num_phones, size=SMOKE.output_length(t))
    return Batch(frames, language_id=1, phone_labels=labels)


def make_corpus(language_id=0, frames=3000, seed=0, dim=8, pool_size=10, phones=6, noise=0.3,
                speakers=2, labeled=False, world=0):
    pool = gen_language_pool(pool_size, dim, world)
    spec = gen_language_spec(pool, phones, [world, language_id], language_id=language_id)
    return synthesize_corpus(spec, frames, speakers, noise, [seed, 100 + language_id], labeled=labeled)


@pytest.fixture(scope="session")
def small_corpora():
    """Three labeled source languages and one target, sized for SMALL."""
    sources = [make_corpus(i, 3000, seed=7) for i in range(3)]
    labeled = {i: make_corpus(i, 1500, seed=8, labeled=True) for i in range(3)}
    target = make_corpus(5, 3000, seed=7)
    return sources, labeled, target


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS):
            terminalreporter.write_line(line)
