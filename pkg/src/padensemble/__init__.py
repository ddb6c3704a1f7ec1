"""Pad-to-largest augmentation, jitter class balancing and ensemble classification
for small, imbalanced, variably sized image corpora."""

from .augment import JitterSpec, OversamplePlan, PaddingSpec, apply_jitter, balance_corpus, pad_to, plan_oversample
from .corpus import CorpusStats, ImageSample, SplitSpec, compute_stats, load_corpus, stratified_split
from .ensemble import Prediction, classify, predict, prepare_inputs
from .eval import ConfusionMatrix, F1Report, confusion, f1_report, score, write_submission
from .model import BackboneSpec, Classifier, EnsembleSpec, build_classifier, forward, softmax
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train_ensemble, train_member

__version__ = "0.1.0"
