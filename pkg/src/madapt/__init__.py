"""Desk-scale meta-adaptive pretraining of self-supervised sequence encoders."""

from madapt.backbone import (EncoderParams, LayerStates, ModelConfig, ParamStore, ema_decay, extract_embeddings,
                             forward, init_params, param_combine, teacher_ema_update)
from madapt.config import RunConfig
from madapt.corpus import (TOY_HOUR, Corpus, LanguageSpec, Task, Utterance, gen_language_pool, gen_language_spec,
                           partition_chunks, read_corpus, sample_task, synthesize_corpus, write_corpus)
from madapt.errors import (ArgumentError, ConfigError, DataError, EvaluationError, FormatError, GenerationError,
                           MadaptError, StructuralError)
from madapt.evaluation import (AbxItem, MetricsReport, UnitSequence, abx_error, collect_triphones, dtw_distance,
                               evaluate, extract_units, per, pnmi)
from madapt.meta import (EpisodeConfig, EpisodeResult, MetaState, active_forget, adapt, foblo_update, inner_lr,
                         multi_task_pretrain, outer_lr, reptile_update, run_inner_loop, run_meta_training,
                         run_outer_steps, warmup_heads)
from madapt.objectives import (Batch, MaskSpec, codebook_assign, codebook_ema_update, grad_check,
                               interleave_lambda, sample_mask, sl_loss_and_grad, ssl_loss_and_grad)

__version__ = "0.1.0"
