from ennkit.enn.reference import (
    IndexMismatchError,
    ReferenceDistribution,
    bernoulli,
    categorical,
    gaussian,
    uniform,
)
from ennkit.enn.models import (
    BbbCastEnn,
    DropoutEnn,
    EnnModel,
    EnsembleEnn,
    EpinetEnn,
    HypermodelEnn,
    IndexedPrior,
    MlpEnn,
    build_model,
    enn_backward,
    enn_forward,
    make_bbb_cast,
    make_dropout,
    make_ensemble,
    make_ensemble_plus,
    make_epinet,
    make_hypermodel,
    make_mlp,
)
