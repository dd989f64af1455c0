"""simcmf: cross-modal fine-tuning of promptable segmentation backbones.

A small convolutional adapter aligns any C-channel imaging modality with the
3-channel input of a frozen pretrained patch embedding; injectable
parameter-efficient fine-tuning strategies adapt the backbone; a benchmark
builder turns semantic labels into click-prompt instances; and an evaluation
harness scores instance-averaged mIoU.
"""

__version__ = "0.1.0"

from .alignment import (
    AdapterConfig,
    AlignmentModule,
    CrossModalAdapter,
    adopt_pretrained_embedding,
    build_adapter,
    count_params,
)
from .backbone import (
    BackboneConfig,
    MaskPrediction,
    PromptableSegmenter,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    InstanceMask,
    ModalityRecord,
    compute_click,
    decompose_semantic_to_instances,
    load_dataset,
    make_pseudo_modality,
    prepare_dataset,
    resize_for_model,
    subsample,
)
from .evaluation import EvalReport, evaluate, iou, report
from .model import (
    CrossModalSegmenter,
    build_model,
    build_scratch_model,
    load_model_checkpoint,
    save_model_checkpoint,
)
from .peft import (
    InjectedBackbone,
    PeftConfig,
    budget_balance,
    inject,
    trainable_report,
)
from .train import TrainConfig, SweepResult, schedule_lr, sweep_lr, train
