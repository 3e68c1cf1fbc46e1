"""Prompt-conditioned LoRA generation with a hyper-convolutional decoder."""

from .backbone import Backbone, BackboneConfig, CharTokenizer, merge, train_backbone
from .codec import WeightLayout, WeightTokenGrid, build_layout, decode, encode
from .decoder import (LARGE_SCHEDULE, REDUCED_SCHEDULE, BlockSpec, DecoderSpec, HyperConvBlock,
                      HyperDecoder, chain_spec, decoder_forward, desk_spec, validate_spec)
from .encoder import (ConditionEmbedding, EmbeddingCache, HashedNgramEncoder, chunk_long_sequence,
                      make_encoder, register_encoder)
from .errors import ConfigurationError, DomainError, Prompt2LoraError, StructuralError, TrainingError
from .evaluation import (EvalReport, ProtocolConfig, aggregate_reports, closeset_protocol,
                         crossdomain_protocol, efficiency_report, evaluate_generator, export_weight_map,
                         generate_adapter, openset_protocol, rotations, weight_map)
from .tasks import DEFAULT_TASKS, Task, TaskDataset, make_task, make_tasks, sample_prompt_batch
from .trainer import GeneratorTrainer, ParameterGenerator, RunConfig, augment_target, mse_loss
from .zoo import LoRACheckpoint, Zoo, ZooRecipe, build_zoo, collect_checkpoints, evaluate, zero_adapter

__version__ = "0.1.0"
