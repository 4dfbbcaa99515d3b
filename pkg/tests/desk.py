"""Desk-scale directional experiment shared by the acceptance criteria.

One run per seed: four source languages and one held-out target drawn from a
shared phone pool, SSL multi-task pretraining, then FOBLO, Reptile and FOBLO
without active forgetting meta-trained from the same initialization, and
within-speaker ABX on a held-out target split after fast adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from madapt.backbone import ModelConfig
from madapt.corpus import TOY_HOUR, Task, gen_language_pool, gen_language_spec, partition_chunks, \
    synthesize_corpus, take_frames
from madapt.evaluation import abx_error, collect_triphones
from madapt.meta import EpisodeConfig, adapt, multi_task_pretrain, run_meta_training

SEEDS = (0, 1, 2, 3, 4)
BUDGETS = (1 / 6, 1.0, 10.0)


@dataclass(frozen=True)
class DeskSettings:
    pool_size: int = 24
    input_dim: int = 16
    phones: int = 12
    sources: int = 4
    noise: float = 0.6
    speakers: int = 4
    source_hours: float = 3.0
    labeled_hours: float = 1.0
    target_hours: float = 10.0
    test_hours: float = 1.5
    pretrain_steps: int = 2000
    episodes: int = 40
    meta_batch: int = 2
    beta: float = 0.3
    adapt_steps: int = 200
    layer: int = 3
    model: ModelConfig = ModelConfig(input_dim=16, hidden_dim=32, num_layers=4, num_codebook_layers=1,
                                     codebook_size=32, supervised_layer=3, num_languages=4, num_phones=24)
    episode: EpisodeConfig = EpisodeConfig(inner_steps=180, outer_steps=20, inner_lr=1e-3,
                                           inner_warmup_steps=60, outer_lr_peak=3e-3, mask_span=3)


def run_seed(seed: int, s: DeskSettings = DeskSettings()) -> dict[str, float]:
    """Within-speaker ABX per condition: ``foblo@<budget>``, ``mt``, ``reptile``, ``no_af``."""
    hours = lambda h: int(round(h * TOY_HOUR))  # noqa: E731
    pool = gen_language_pool(s.pool_size, s.input_dim, seed)
    specs = [gen_language_spec(pool, s.phones, [seed, 10 + lang], language_id=lang)
             for lang in range(s.sources + 1)]
    target = s.sources
    sources = [synthesize_corpus(specs[lang], hours(s.source_hours), s.speakers, s.noise, [seed, 20 + lang])
               for lang in range(s.sources)]
    labeled = {lang: synthesize_corpus(specs[lang], hours(s.labeled_hours), s.speakers, s.noise,
                                       [seed, 30 + lang], labeled=True) for lang in range(s.sources)}
    target_pool = synthesize_corpus(specs[target], hours(s.target_hours), s.speakers, s.noise, [seed, 40])
    target_test = synthesize_corpus(specs[target], hours(s.test_hours), s.speakers, s.noise, [seed, 41])

    ep = s.episode
    ep_no_af = replace(ep, active_forgetting=False)
    phi0, _ = multi_task_pretrain(s.model, sources, labeled, "ssl", s.pretrain_steps, ep, seed)
    tasks = [t for c in sources for t in partition_chunks(c, TOY_HOUR)]

    def meta(optimizer, cfg, labels):
        return run_meta_training(phi0, tasks, labels, s.episodes, 1, optimizer, s.beta, cfg, seed,
                                 meta_batch=s.meta_batch).phi

    foblo = meta("foblo", ep, labeled)
    reptile = meta("reptile", ep, None)
    no_af = meta("foblo", ep_no_af, labeled)

    def score(params):
        return abx_error(collect_triphones(target_test, params, s.layer, 10, 0), "within")

    out = {}
    for h in BUDGETS:
        chunk = Task(target, 0, take_frames(target_pool, hours(h)), [])
        out[f"foblo@{h:g}"] = score(adapt(foblo, chunk, s.adapt_steps, ep, seed))
        if h == 1.0:
            out["mt"] = score(adapt(phi0, chunk, s.adapt_steps, ep, seed))
            out["reptile"] = score(adapt(reptile, chunk, s.adapt_steps, ep, seed))
            out["no_af"] = score(adapt(no_af, chunk, s.adapt_steps, ep_no_af, seed))
    return out
