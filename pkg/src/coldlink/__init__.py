"""Few-shot link prediction for newly arriving nodes in temporal graphs."""

from .autodiff import (AdamState, NonFiniteError, ParamSet, Tape, Tensor,
                       adam_step, backward, finite_difference, load_params,
                       save_params, sgd_step)
from .encoder import (EncoderDims, SpanMemoryState, embed, init_encoder_params,
                      time_encode, update_span_memory)
from .graph import (ChronoSplit, IngestSchema, TemporalEvent, TemporalGraph,
                    load_cache, load_csv, save_cache, split, temporal_neighbors)
from .meta import (AdaptedParams, FusedParams, MetaConfig, adapt_task, fuse,
                   gradient_check, meta_test, meta_train_epoch, node_adapt, train)
from .metrics import ScoredPrediction, accuracy, auc, macro_f1, metrics_report
from .predictor import bce_loss, init_predictor_params, predict
from .synth import SynthSpec, generate
from .tasks import (NegativeSample, NodeTask, SpanPartition, build_test_tasks,
                    build_train_tasks, partition_spans, tasks_to_jsonl)

__version__ = "0.1.0"
