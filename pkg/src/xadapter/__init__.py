"""Cross-attention adapter blocks for a frozen masked-language-model encoder.

The package provides a small float64 autodiff core, a toy transformer MLM
host, the adapter block with two feature sources (bank retrieval and chunked
text embeddings), MLM adaptation with a frozen host, prompt-based zero-shot
classification, and a JSON-driven CLI.
"""

__version__ = "0.1.0"

from .adapter import (AdapterConfig, FeatureMatrix, InsertionPlan, T_EXPERT,
                      V_EXPERT, XAdapterLayer, adapter_forward, cross_attention,
                      count_adapter_params, default_positions, init_adapter,
                      make_insertion_plan)
from .adaptation import AdaptationRun, adaptation_step, run_adaptation
from .encoder import (EncoderConfig, EncoderModel, PretrainConfig, count_params,
                      count_encoder_weights, count_layer_weights, encode,
                      load_encoder, mlm_logits, pretrain_toy, save_encoder)
from .errors import (BankFormatError, ConfigError, ContractViolation,
                     DimensionError, TemplateError)
from .masking import MaskedSample, MaskingPolicy, mask_batch, mask_count
from .numerics import AdamState, ParameterSet, Tensor, adam_step, backward
from .reasoning import (COLOR_LABELS, COLOR_PROMPTS, LabelSet, PromptTemplate,
                        ZeroShotResult, builtin_color_pack, mask_logits,
                        render_prompt, stack_paired_features, zero_shot_classify)
from .retrieval import (FeatureBank, RetrievalResult, bank_build, cosine_topk,
                        gather_features, inject_noise, load_bank, retrieve_images,
                        save_bank, split_sentences)
from .textfeat import (ChunkedFeatures, EmbeddingProvider, HashStubProvider,
                       assemble_text_features, chunk_tokens)
from .vocab import TokenSequence, Vocabulary, build_model_input, tokenize
