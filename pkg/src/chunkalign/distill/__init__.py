from .losses import cosine_loss, similarity_loss, total_loss_op
from .optim import OptimizerState, lr_at, stable_adamw_step
from .teacher import (
    OracleTeacher,
    RecordTeacherSource,
    Teacher,
    TeacherRecord,
    load_teacher_jsonl,
    teacher_record,
    write_teacher_jsonl,
)
from .train import (
    PRODUCTION_TRAIN,
    AlignmentBatch,
    PreparedDoc,
    TrainConfig,
    TrainResult,
    evaluate_alignment,
    fit,
    prepare_corpus,
    train,
)

__all__ = [
    "PRODUCTION_TRAIN",
    "AlignmentBatch",
    "OptimizerState",
    "OracleTeacher",
    "PreparedDoc",
    "RecordTeacherSource",
    "Teacher",
    "TeacherRecord",
    "TrainConfig",
    "TrainResult",
    "cosine_loss",
    "evaluate_alignment",
    "fit",
    "load_teacher_jsonl",
    "lr_at",
    "prepare_corpus",
    "similarity_loss",
    "stable_adamw_step",
    "teacher_record",
    "total_loss_op",
    "train",
    "write_teacher_jsonl",
]
