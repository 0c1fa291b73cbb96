"""Semi-supervised multi-modal knowledge-graph entity alignment.

Six modality encoders (graph structure, relation/attribute bags-of-words,
relation/attribute text embeddings, visual features) are fused into a joint
embedding and trained with a distribution-alignment KL loss, a mutual-
information bound between joint and uni-modal views, and a bidirectional
momentum contrastive loss.  Unlabeled entities are folded in through
temporally-stable pseudo-labels.
"""

from .encoders import (EmbeddingSet, EncoderConfig, FeatureDims, GraphInputs, MI_MODALITIES,
                       MODALITIES, MultiModalEncoder, encode_pair, fuse_joint, prepare_inputs)
from .errors import (CheckpointError, ConfigError, FormatError, NonFiniteLossError, ParseError,
                     ValidationError)
from .evaluation import (EvalReport, SimilarityMatrix, emit_plot_data, evaluate_alignment,
                         export_alignments, rank_metrics, similarity_matrix)
from .features import (BowVocabulary, ModalFeatureBundle, bow_features, build_bow_vocab,
                       load_feature_file, save_feature_file, stub_text_encoder)
from .kg import (Adjacency, KnowledgeGraph, MMKGPair, SeedAlignmentSet, build_adjacency, load_kg,
                 load_seeds, split_seeds, write_kg, write_seeds)
from .losses import (LossBreakdown, MutualInfoEstimator, alignment_distribution,
                     alignment_kl_loss, candidate_logits, combine_losses, contrastive_loss,
                     contrastive_loss_from_probabilities, momentum_update, mutual_info_estimate,
                     mutual_info_loss, positive_probability)
from .pseudo import (PseudoLabelStore, calibrate_pseudo_labels, predict_unlabeled, reorder_pairs,
                     shuffled_batches)
from .synth import generate_synthetic_pair
from .dataset import load_dataset, save_dataset
from .training import (TrainConfig, TrainData, TrainState, build_state, evaluate_epoch,
                       load_checkpoint, prepare_training_data, read_checkpoint_config,
                       run_training, save_checkpoint, train_epoch)

__version__ = "0.1.0"
