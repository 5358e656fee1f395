"""Linear GNN training and exact node unlearning by weight projection."""

from .errors import (
    CapacitanceSingular,
    ConfigError,
    EmptyRemainingSet,
    FactorizationError,
    FormatError,
    IncompatibleModel,
    TrainingDiverged,
    UnlearnError,
)
from .features import (
    GramState,
    ProjectionResult,
    delta_measure,
    gram_downdate,
    gram_precompute,
    pinv_solve,
    project_onto_span,
    span_residual,
)
from .graph import (
    CsbmParams,
    Graph,
    PropagationMatrix,
    affected_set,
    build_propagation,
    delete_nodes,
    generate_csbm,
    multi_hop_features,
    node_set,
    propagate,
)
from .linear_model import (
    LossGrad,
    ModelWeights,
    Provenance,
    TrainConfig,
    TrainTrace,
    evaluate,
    finetune,
    hessian,
    loss_and_grad,
    pegasos_train,
    train,
)
from .task import GraphTask
from .unlearn import (
    BoundConstants,
    UnlearnRequest,
    UnlearnResult,
    estimate_constants,
    fisher_plus_unlearn,
    influence_plus_unlearn,
    projector_unlearn,
    prop2_condition,
    retrain_baseline,
    theorem1_bound,
)

__version__ = "0.1.0"
