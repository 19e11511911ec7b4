"""Cross-modal knowledge transfer at desk scale: block-affine and
low-rank adapters trained against a frozen expression teacher, evaluated
with a PCA-ridge probe scored by per-gene Pearson correlation."""

from .adapters import (AdapterSet, AdapterSpec, attach, attach_adalora,
                       attach_bone, attach_lora, adalora_step_schedule,
                       merge, normalize_kind, trainable_fraction)
from .alignment import (AlignedModel, AlignmentConfig, build_pseudo_labels,
                        kd_loss, struct_loss, total_loss, train_alignment)
from .autodiff import Tape, Tensor, as_matrix
from .core import (AdamState, GradCheckReport, adam_step,
                   finite_difference_check, kl_divergence,
                   softmax_with_temperature, svd_thin)
from .data import (GeneratorConfig, PairedDataset, generate_synthetic,
                   load_dataset, load_dataset_csv, qc_filter, save_dataset)
from .encoders import (ClassifierHead, Projector, StudentBackbone,
                       TeacherModel, forward_student, forward_teacher,
                       init_classifier, init_projector, init_student,
                       init_teacher)
from .model_io import load_model, save_model
from .probe import (EvalReport, PccResult, ProbeModel, cross_validate,
                    fit_pca, fit_probe, fit_ridge, pearson_pcc, select_hvg)
from .report import BenchCell, BenchmarkReport

__version__ = "0.1.0"

__all__ = [
    "AdapterSet", "AdapterSpec", "attach", "attach_adalora", "attach_bone",
    "attach_lora", "adalora_step_schedule", "merge", "normalize_kind",
    "trainable_fraction",
    "AlignedModel", "AlignmentConfig", "build_pseudo_labels", "kd_loss",
    "struct_loss", "total_loss", "train_alignment",
    "Tape", "Tensor", "as_matrix",
    "AdamState", "GradCheckReport", "adam_step", "finite_difference_check",
    "kl_divergence", "softmax_with_temperature", "svd_thin",
    "GeneratorConfig", "PairedDataset", "generate_synthetic", "load_dataset",
    "load_dataset_csv", "qc_filter", "save_dataset",
    "ClassifierHead", "Projector", "StudentBackbone", "TeacherModel",
    "forward_student", "forward_teacher", "init_classifier",
    "init_projector", "init_student", "init_teacher",
    "load_model", "save_model",
    "EvalReport", "PccResult", "ProbeModel", "cross_validate", "fit_pca",
    "fit_probe", "fit_ridge", "pearson_pcc", "select_hvg",
    "BenchCell", "BenchmarkReport",
    "__version__",
]
