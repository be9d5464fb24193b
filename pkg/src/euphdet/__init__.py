"""Two-stage detection of impromptu euphemisms in noisy text corpora."""

__version__ = "0.1.0"

from .coarse import filter_candidates, train_coarse
from .corpus import (Corpus, Sentence, Vocabulary, build_vocab, ingest,
                     merge_phrases, tokenize)
from .datasets import (GoldLabels, MaskedSample, SynthSpec,
                       build_coarse_dataset, build_fine_corpus,
                       make_synthetic_corpus, plant_impromptu)
from .devset import DevSample, build_dev_set
from .embeddings import EmbeddingMatrix, nearest, train_embeddings
from .errors import (CheckpointError, EuphdetError, InputError,
                     InvariantError, ProviderError, TrainingDiverged)
from .evaluation import (DetectionReport, evaluate_detections,
                         precision_at_k, rank_summary, recall_at_k)
from .fine import (dev_accuracy, iterate_training, mask_for_cam,
                   rank_positions, score_candidates, train_fine)
from .index import (InvertedIndex, build_inverted_index, expand_seeds,
                    lexicon_intersect)
from .model import (ModelConfig, config_for_vocab, load_checkpoint,
                    save_checkpoint)
from .pipeline import PipelineConfig, Workdir, run_pipeline
