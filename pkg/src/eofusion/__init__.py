"""Context-aware radar/optical satellite time-series fusion.

Staged pipeline: per-modality autoencoder pretraining with context-weighted
reconstruction losses, frozen-backbone fusion into a compact per-pixel
embedding, dense embedding cubes with PCA visualisation, and a downstream
GPP regression head.
"""

__version__ = "0.1.0"

from .datacube import (  # noqa: F401
    BandSpec, DataCube, NormalizationPolicy, QualityRecord, SynthSpec,
    apply_mask, generate_synthetic_cube, generate_synthetic_scene, load_cube,
    normalize_01, quality_records, rolling_mean_s1, save_cube,
)
from .sampling import (  # noqa: F401
    EligibilityPolicy, FusedSample, PatchSample, SamplingScheme,
    SplitAssignment, WindowIndex, align_modalities, enumerate_fused_windows,
    enumerate_windows, extract_fused_sample, frame_eligibility, split_by_cube,
    subselect_frames, S1_SCHEME, S2_SCHEME,
)
from .losses import (  # noqa: F401
    ContextWeights, LossBreakdown, central_mae, central_sam, context_weights,
    fusion_losses, hybrid_s2_pretrain_loss, s1_pretrain_loss, sam, ssim,
    ssim_loss, weighted_mae,
)
from .autoencoder import (  # noqa: F401
    LatentSequence, ModalityAutoencoder, ModalityConfig, CBAM,
    MultiscaleBlock, encode_sample, decode_latent, parameter_count,
    positional_encoding_irregular,
)
from .fusion import (  # noqa: F401
    FusedEmbedding, FusionConfig, FusionModel, fuse_encode_sample,
    trainable_parameter_partition,
)
from .checkpoint import (  # noqa: F401
    Checkpoint, build_model, verify_fusion_refs,
    STAGE_FUSION, STAGE_GPP, STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2,
)
from .trainer import (  # noqa: F401
    FusedPatchDataset, MetricsLog, PatchDataset, SplitDatasets, TrainConfig,
    evaluate, evaluate_model, pretrain_modality, train_fusion,
)
from .embeddings import (  # noqa: F401
    EmbeddingCube, PCAProjection, embed_cube, fit_pca, load_embedding_cube,
    render_comparison, save_embedding_cube,
)
from .gpp import (  # noqa: F401
    FluxSeries, GPPModelConfig, GPPRegressor, GPPSample, SiteFixture,
    build_sequences, footprint_average, generate_flux_fixture,
    interpolate_embeddings, nrmse, quality_filter, rmse, train_gpp,
)
