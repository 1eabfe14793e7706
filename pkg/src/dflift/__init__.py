"""Decision-focused uplift modeling for budget-constrained treatment allocation."""

from .allocate import (
    AllocationSolution,
    BudgetSpec,
    brute_force_mckp,
    dual_assignment,
    eom_evaluate,
    scale_budget,
    solve_allocation,
)
from .bilevel import (
    Adam,
    BidfclTrainer,
    BilevelConfig,
    TrainConfig,
    cg_solve,
    explicit_hypergradient,
    implicit_hypergradient,
    inner_assumed_update,
    pretrain_teacher,
    train_baseline_tsm,
    train_bidfcl,
    train_dfcl,
)
from .data import (
    Dataset,
    DataSource,
    FullOutcomeTable,
    ParseError,
    PredictionMatrix,
    Sample,
    ValidationError,
    concat_datasets,
    load_dataset,
    load_outcome_table,
    save_dataset,
    save_outcome_table,
    split_dataset,
)
from .harness import (
    Benchmark,
    DataSizes,
    ExperimentConfig,
    MetricsReport,
    budget_sweep,
    make_benchmark,
    run_experiment,
    train_method,
)
from .losses import (
    BridgeGates,
    CounterfactualLabels,
    SurrogateGradientTable,
    counterfactual_labels,
    decision_loss_unbiased,
    default_lambda_grid,
    difd_gradient_table,
    difd_loss,
    dpl_loss,
    parameterized_prediction_loss,
    pifd_gradient_table,
    pifd_loss,
    ppl_loss,
    prediction_loss_rct,
)
from .network import (
    NetworkSpec,
    forward,
    forward_graph,
    grad,
    hessian_vector_product,
    init_params,
    load_params,
    mixed_vjp,
    save_params,
)
from .synth import (
    GeneratorSpec,
    PolicyModel,
    Population,
    build_obs_via_policy,
    generate_population,
    sample_rct,
    subset_population,
)

__version__ = "0.1.0"
