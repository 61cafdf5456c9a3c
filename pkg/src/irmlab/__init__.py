"""Injectable realignment models on a desk-scale Llama-style host."""

from .analysis import (average_heatmap, contrast_heatmaps, dominant_index, fluency_delta,
                       lmhead_outliers, striation_ratio, topk_position_histogram)
from .datasets import CorpusSpec, QAPair, Style, Tokenizer, generate_corpus, marker_rate, stylize
from .host import ForwardTrace, HostModel, InjectionPlan, ModelConfig, continuity_probe
from .irm import InjectionMatrix, IrmConfig, IrmNet, init_irm, irm_forward
from .training import TrainConfig, TrainReport, adam_step, pretrain_host, split_dataset, train_irm

__version__ = "0.1.0"
