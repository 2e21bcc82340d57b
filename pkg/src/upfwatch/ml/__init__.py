from upfwatch.ml.data import (
    GAME_CLASSES,
    Dataset,
    EmptyAfterCleaning,
    MissingLabelColumn,
    load_dataset,
    stratified_split,
    synth_dataset,
)
from upfwatch.ml.evaluate import EvalProtocol, EvalResult, evaluate
from upfwatch.ml.models import (
    DecisionTreeModel,
    DimensionMismatch,
    GradientBoostModel,
    KNNModel,
    ModelError,
    ModelSpec,
    RandomForestModel,
    TrainedModel,
    fit,
    load_model,
    model_from_dict,
    predict_proba,
    save_model,
)

__all__ = [
    "GAME_CLASSES",
    "Dataset",
    "EmptyAfterCleaning",
    "MissingLabelColumn",
    "load_dataset",
    "stratified_split",
    "synth_dataset",
    "EvalProtocol",
    "EvalResult",
    "evaluate",
    "DecisionTreeModel",
    "DimensionMismatch",
    "GradientBoostModel",
    "KNNModel",
    "ModelError",
    "ModelSpec",
    "RandomForestModel",
    "TrainedModel",
    "fit",
    "load_model",
    "model_from_dict",
    "predict_proba",
    "save_model",
]
