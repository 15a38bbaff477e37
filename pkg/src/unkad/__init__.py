"""Desk-scale open-set object detection sandbox.

A seeded synthetic world, a toy differentiable detector trained with an
alternating four-step schedule that pseudo-labels unknown objects, four
rejection strategies, and the open-set metric suite.
"""

from .model import (
    Box,
    Detection,
    GroundTruthObject,
    LabelSpace,
    LabelSpaceViolation,
    RegionProposal,
    validate_label_space,
)
from .geometry import MatchResult, iou, match_greedy, nms
from .pseudolabel import (
    PseudoLabel,
    TauObj,
    compute_tau_obj,
    generate_pseudo_labels,
    select_foreground_rois,
)
from .rejection import (
    GradientOracle,
    MissingUnknownSlot,
    RejectionConfig,
    apply_rejection,
    direct_predict,
    energy_reject,
    energy_score,
    msp_reject,
    odin_perturb,
    odin_reject,
)
from .metrics import (
    ConfusionCounts,
    EvaluationReport,
    average_precision,
    avg_obj,
    build_report,
    confusion_counts,
    mean_average_precision,
    unknown_prf,
    wi_no_rejection,
    wilderness_impact,
)
from .simworld import (
    FourStepResult,
    ImageRecord,
    Scenario,
    ScenarioConfig,
    ToyDetector,
    TrainConfig,
    generate_scenario,
    gradient_oracle,
    run_four_step,
)

__version__ = "0.1.0"
