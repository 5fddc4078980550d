"""Collaborative residual networks for multi-label diagnosis-code prediction.

The package trains feed-forward and residual networks, from scratch on top
of numpy, to map an episode's prescribed medications (a sparse 0/1 vector
over medication-dose tokens) to its set of 3-character ICD10 categories.
It covers the full workflow: CSV ingestion and cleaning, vocabulary building
and binarization, stratified splitting, training with Adam and early
stopping, ranking and set-based evaluation, checkpointing, and a CLI.
"""

from .data import (
    CleaningReport,
    DataError,
    Dataset,
    Demographics,
    EpisodeRecord,
    LabelFrequencyReport,
    SyntheticOracle,
    SyntheticSpec,
    Vocabulary,
    age_decade,
    binarize_for_inference,
    build_vocab_and_binarize,
    clean,
    generate_synthetic,
    icd10_chapter,
    ingest,
    ingest_lines,
    label_frequency_report,
    load_dataset,
    med_token,
    reconstruct_records,
    save_dataset,
    stratified_split,
)
from .linalg import (
    DEFAULT_DTYPE,
    InvariantError,
    SeededRng,
    ShapeError,
    SparseBinaryMatrix,
    default_dtype,
    matmul,
    sample_gaussian,
    set_default_dtype,
    sparse_dense_product,
    sparse_transpose_dense_product,
    use_dtype,
)
from .metrics import (
    MetricError,
    MetricsReport,
    PredictionBatch,
    SetMetrics,
    compute_report,
    coverage_error,
    f1_score,
    grouped_report,
    lrap,
    predicted_sets,
    primary_accuracy,
    ranking_loss,
    render_full_report,
    render_group_table,
    render_summary_row,
    set_metrics,
    subset_accuracy,
)
from .nn import (
    BASELINE_IDS,
    INFER,
    TRAIN,
    CollabResConfig,
    ForwardTrace,
    LayerSpec,
    ModelSpec,
    build_baseline,
    build_collabres,
    count_params,
    dense_forward,
    dropout_forward,
    init_params,
    model_backward,
    model_forward,
    param_shapes,
    relu,
    residual_block_forward,
    sigmoid,
    sigmoid_bce,
    spec_from_dict,
    spec_to_dict,
)
from .training import (
    AdamState,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    EarlyStopper,
    EpochStats,
    NotACheckpointError,
    PredictionResult,
    TrainConfig,
    TrainHistory,
    TruncatedCheckpointError,
    adam_step,
    demographic_groups,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__version__ = "1.0.0"

__all__ = [name for name in dir() if not name.startswith("_")]
