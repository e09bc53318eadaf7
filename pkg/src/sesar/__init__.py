"""Semi-supervised active learning for skeleton action sequences."""

from .clustering import ClusterBudgets, ClusterModel, LatentKMeans, budgets, kmeans_fit
from .dataset import (Dataset, LabelPool, SkeletonSequence, SynthConfig, load_jsonl,
                      normalize, oracle_annotate, resample_length, save_jsonl, synth_generate)
from .model import (SesarClassifier, SesarModel, TrainConfig, encode_all, evaluate,
                    sample_loss, train)
from .selection import (SelectionResult, entropy, js, kl, select_coreset, select_dis,
                        select_kjs, select_kt, select_uniform, variance_ratio)

__version__ = "0.1.0"
