"""Localized-graph collaborative filtering and its evaluation harness."""

from .errors import DomainError, LgcfError, ParseError
from .rng import seed_stream, walk_stream
from .evaluation import (EvalProtocol, EvalReport, MetricStats,
                         aggregate_reports, degree_probe, dump_cases, evaluate,
                         hr_at_k, make_synthetic, metrics_csv, ndcg_at_k,
                         sparsity_sweep)
from .graph import (BipartiteGraph, IngestResult, SplitSpec, build_graph,
                    density, ingest_interactions, load_graph_dir, load_split,
                    normal_split, save_graph_dir, save_split, sparse_split,
                    sparsity_levels)
from .labeling import (UNREACHABLE, LabelEncoding, drnl_label, label_graph,
                       min_distances, one_hot_features)
from .models import (MODEL_KINDS, EmbeddingTable, EpochRecord, Propagation,
                     TrainConfig, TrainedModel, TrainResult,
                     emb_joint_loss_and_grads, init_embeddings, lgcf_emb_score,
                     lgcf_ens_score, lgcf_inputs, lgcf_score,
                     lightgcn_propagate, load_model, mf_score, param_count,
                     run_gradcheck, sample_negative, save_model, train)
from .nn import (AdamState, GnnGradients, GnnParameters, GradCheckReport,
                 adam_step, bpr_loss, bpr_pair_grads, forward_instance,
                 gcn_backward, gcn_forward, grad_check, init_adam,
                 init_gnn_params, normalize_adjacency, score, sigmoid,
                 softplus, sum_pool)
from .subgraph import (LocalizedGraph, WalkConfig, dump_localized_graph,
                       extract, induce_subgraph, parse_localized_graph,
                       rwr_trace, union_nodes)

__version__ = "0.1.0"
