"""Multimodal dynamic late fusion with feature and modality informativeness."""

from .confidence import (
    ConfidenceRecord,
    classification_loss,
    confidence_loss,
    estimate_tcp,
    tcp_calibration_stats,
    true_class_probability,
    unimodal_forward,
)
from .data import (
    GroundTruth,
    ModalityView,
    MultimodalDataset,
    SplitSpec,
    SyntheticImage,
    SyntheticSpec,
    SyntheticTabular,
    load_dataset,
    load_image_modality,
    load_tabular_modality,
    mask_image_modality,
    patient_split,
    save_dataset,
    synthesize_dataset,
)
from .evaluation import (
    Metrics,
    MetricSummary,
    compute_metrics,
    evaluate_masked,
    evaluate_model,
    mean_informativeness_map,
    render_table,
    tcp_error_curve,
)
from .fusion import (
    FusionConfig,
    LossWeights,
    MMDynamics,
    final_classifier_forward,
    final_loss,
    fuse_dynamic,
    fuse_static,
    total_loss,
)
from .informativeness import apply_gate, image_gate_forward, l1_gate_loss, rank_features, tabular_gate_forward
from .trainer import (
    TrainConfig,
    TrainedModel,
    run_ablation,
    run_sweep,
    train,
    train_early_fusion_baseline,
)

__version__ = "0.1.0"
