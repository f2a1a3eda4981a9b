"""Simultaneous source-free domain adaptation and class unlearning.

A source-trained classifier is adapted to an unlabeled target domain while
source-exclusive classes are scrubbed, with no access to any forget data:
synthetic bank inputs stand in for the missing class, and rescaled labels
steer the unlearning loss away from the retained classes. Includes the
unknown-class and continual variants, a gradient-flow audit, and the full
evaluation battery (accuracies, unlearn score, entropy MIA, FNR/FPR, ECE).
"""

from .data import (
    AffineShift,
    DomainDataset,
    SplitSpec,
    dataset_from_csv,
    dataset_to_csv,
    make_synthetic_domains,
    sample_ood_classes,
    split_retain_forget,
    train_test_split,
)
from .harness import ExperimentConfig, run_experiment, run_retrain_oracle, run_finetune_baseline
from .metrics import (
    MetricsReport,
    accuracy,
    adversarial_cosine_report,
    build_report,
    ece,
    fnr_fpr_sweep,
    mia_accuracy,
    unlearn_score,
)
from .models import (
    ClassifierModel,
    LabelSpace,
    NanLossError,
    init_model,
    load_checkpoint,
    per_class_head_grad_norms,
    save_checkpoint,
    train_source,
)
from .sfda import EntropyOnlyLoss, SfdaLoss, ShotLikeLoss, make_sfda_loss
from .unlearn import (
    AdversarialBank,
    RescaledLabel,
    ScadaTrainer,
    UnlearnConfig,
    adv_loss,
    init_adversarial_samples,
    mu_loss,
    rescale_labels,
    run_scada_ul,
    run_sfda_only,
)
from .variants import (
    ForgetRequestSequence,
    GammaVector,
    estimate_gamma,
    predict_forget_classes,
    run_c_scada,
    run_uc_scada,
)
from .verify import check_theorem_4_1, closed_form_head_gradients, labeling_ablation, stage_ablation

__version__ = "0.1.0"
