"""biastrace: attribute a graph node classifier's demographic bias to
individual training nodes, and debias the model by deleting the most
harmful ones.

The bias measure is the Wasserstein-1 distance between the per-group
distributions of the model's output probabilities; per-node influence on
it is estimated with one damped-curvature solve per training node instead
of retraining, including the loss shift a node induces on its neighbors'
training terms.
"""

__version__ = "0.1.0"

from .config import AuditConfig, LISSA_GRID, apply_overrides, config_hash, parse_config, serialize_config
from .datagen import (BENCHMARK_EXPECTED, SynthConfig, benchmark_audit_config,
                      benchmark_graph, synth_biased_graph, synth_config_from)
from .debias import DebiasReport, debias_run, select_harmful
from .graphs import (ComputationGraph, Graph, GraphFormatError, PathStats, SplitPolicy,
                     canonical_edges, computation_graph, load_graph, load_graph_dir,
                     load_masks, normalized_adjacency, path_stats, remove_node,
                     remove_nodes, save_graph, split, threshold_graph_edges, with_split)
from .influence import (InfluenceRecord, bias_influence, combined_influence,
                        estimate_influences, neighbor_loss_delta, parameter_response,
                        records_from_table, records_to_table)
from .metrics import (BiasReport, ConvergenceError, EmpiricalDistribution, bias_report,
                      disparity, disparity_eo, disparity_generalized, disparity_gradient,
                      disparity_mix, disparity_sp, label_metrics, sinkhorn_distance,
                      wasserstein_1d)
from .model import (HessianFactor, ModelState, Parameters, Predictions, SolverError,
                    TrainingDivergenceError, ce_gradient, evaluate, forward,
                    hessian_factor, hessian_matrix, hvp, hvp_operator, init_parameters,
                    inverse_hvp, load_parameters, loss_components, rng_stream,
                    save_parameters, train, training_gradient, training_loss)
from .oracle import (BoundReport, ConsistencyReport, FidelityReport, SpeedupReport,
                     actual_disparity_delta, consistency_experiment, disjoint_node_sets,
                     fidelity_experiment, pearson, representation_shift_bounds,
                     speedup_experiment)
