"""Federated averaging simulator with a YOLO-format detection evaluator."""

from ._kernels import BACKEND
from .detmetrics import (Box, Detection, EvalReport, average_precision, evaluate, f1_score, iou,
                         match_detections, mean_average_precision, nms, parse_yolo_labels)
from .fedavg import (Client, ClientUpdate, FedRun, GlobalModel, RoundReport, aggregate, run_round,
                     run_until_target, select_best_local)
from .model import (LabeledDataset, ParamVector, TrainConfig, evaluate_accuracy, init_params,
                    local_train, loss)
from .partition import partition_iid, partition_label_skew, shard_stats, synth_dataset

__version__ = "0.1.0"
