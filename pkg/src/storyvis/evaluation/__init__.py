from .bleu import corpus_bleu, evaluate_bleu
from .classifier import (CharClassifier, evaluate_characters, micro_f1_counts,
                         train_char_classifier, validation_char_f1)
from .damsm import (HierarchicalDamsm, evaluate_r_precision,
                    story_contrastive_loss, train_h_damsm)
from .discriminative import evaluate_discriminative, rank_by_cosine
from .report import MetricReport, full_report

__all__ = [
    "CharClassifier", "HierarchicalDamsm", "MetricReport", "corpus_bleu",
    "evaluate_bleu", "evaluate_characters", "evaluate_discriminative",
    "evaluate_r_precision", "full_report", "micro_f1_counts", "rank_by_cosine",
    "story_contrastive_loss", "train_char_classifier", "train_h_damsm",
    "validation_char_f1",
]
