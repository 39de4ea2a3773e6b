"""Query injection for a frozen toy vision encoder.

The package trains small adapters that let a single projected query vector
steer a frozen vision transformer: a spherical query augmentation on the way
in, an entropy regularizer on the query row's cross attention, and a
query-agnostic sinusoidal positional bias that can be precomputed and frozen
for inference.
"""

from .checkpoint import entry_nbytes, load_checkpoint, save_checkpoint
from .encoder import (
    QueryEmbedding,
    VisionTokenGrid,
    VitBlockWeights,
    encode_query,
    init_query_table,
    init_vit_block,
    load_external_query_embedding,
    patchify,
    vit_block,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    FormatError,
    NumericsError,
    QidError,
    VocabularyError,
)
from .numerics import (
    AdamW,
    FlopCounter,
    Rng,
    Tape,
    Tensor,
    backward,
    flop_scope,
    grad_check,
    no_tape,
    record_op,
    stable_child_seed,
    tensor_digest,
)
from .objective import (
    AblationFlags,
    EvalReport,
    MetricsRecord,
    ModelConfig,
    QidModel,
    TrainConfig,
    TrainResult,
    attention_hit_rate,
    cross_entropy,
    dump_attention,
    evaluate,
    partition_params,
    split_dataset,
    total_loss,
    train,
)
from .query_agnostic import (
    SinusoidalBiasCache,
    apply_bias,
    make_bias_cache,
    precompute_bias,
    sinusoidal_table,
)
from .query_aware import (
    CrossAttentionRecord,
    FuseConfig,
    PsiProjector,
    cosine_floor,
    entropy_loss,
    extract_cross_attention,
    fuse_augment,
    init_psi,
    inject,
    inject_rows,
    project_query,
    strip_query,
)
from .synthdoc import (
    SynthSample,
    encode_query_cell,
    generate_dataset,
    glyph_bitmaps,
    read_dataset,
    write_dataset,
)

__version__ = "0.1.0"
