"""sidforge: rating residual quantization for semantic item identifiers.

Trains reference-vector-guided rating residual quantizers over item embedding
matrices, emits hierarchical semantic IDs, and scores SID quality with
cohesion/discrimination metrics plus the usual comparison baselines.
"""

from .baselines import KMeansResult, kmeans, residual_kmeans, rq_vae_train, vq_vae_train
from .dataio import (
    EmbeddingDataset,
    FormatError,
    SidTable,
    load_embeddings,
    load_sids,
    save_embeddings,
    save_report,
    save_sids,
    synth_blobs,
)
from .losses import (
    LossBreakdown,
    batch_pd,
    batch_sc,
    loss_gradients,
    reconstruction_loss,
    total_loss,
)
from .metrics import (
    ClusterAssignment,
    MetricsReport,
    build_clusters,
    codebook_usage,
    collision_rate,
    eval_pd,
    eval_sc,
    evaluate_sids,
    export_projection,
    gini,
    spearman,
)
from .numerics import cosine_sim, dot, l2_norm, pca_project, softmax
from .optimizer import AdamWState, adamw_step, init_adamw
from .projection import (
    DegenerateParameterError,
    ProjectionResult,
    init_reference,
    project_backward,
    project_forward,
)
from .quantizer import (
    Codebook,
    LayerTrace,
    ModelParams,
    ParamGrads,
    QuantizationTrace,
    QuantizerConfig,
    emit_sids,
    init_codebooks,
    initial_residuals,
    quantize_backward,
    quantize_full,
    quantize_layer,
    quantized_embeddings,
    rate,
)
from .trainer import (
    TrainConfig,
    TrainLogRow,
    checkpoint_load,
    checkpoint_save,
    train,
    write_train_log,
)

__version__ = "0.1.0"
