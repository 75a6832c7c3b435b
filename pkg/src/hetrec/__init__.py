"""Heterogeneous graph embedding training: metapath walks, relation-wise ego
graphs, GNN encoders, a sharded parameter server and recall evaluation."""

from .config import RunConfig
from .datasets import BlockBipartite, block_bipartite
from .estimator import HetGraphEmbedding
from .evaluation import EvalConfig, Strategy, evaluate, recall_at_k, recommend, topn_similar
from .graph import EdgeTypeTriple, GraphError, HetGraph, build_graph, parse_edge_type, temporal_split
from .models import ModelConfig, ModelKind, PhiMode, RelationalGNN
from .ps import EmbeddingTable, ParamServer
from .sampling import EgoBatch, PairBatch, PipelineMode, PipelineOrder, gen_pairs, sample_ego, sample_egos
from .trainer import ConfigError, NegMode, PipelineConfig, TrainConfig, Trainer, embed_nodes, train, warm_start
from .walks import MetaPath, WalkConfig, generate_walks, parse_metapath

__version__ = "0.1.0"
