"""Graph-level out-of-distribution detection with prompted edge weights."""

__version__ = "0.1.0"

from .graphs import (  # noqa: F401
    Graph,
    GraphDataset,
    LabeledGraph,
    MotifSpec,
    OodSpec,
    SplitBundle,
    degree_features,
    make_split,
    parse_tu_dataset,
    synth_id,
    synth_ood,
    write_tu_dataset,
)
from .encoder import (  # noqa: F401
    GinEncoder,
    encode_graph,
    encode_nodes,
    freeze,
    load_checkpoint,
    save_checkpoint,
)
from .pretrain import PretrainConfig, pretrain  # noqa: F401
from .prompting import (  # noqa: F401
    DgpConfig,
    DgpModel,
    PromptGenerator,
    branch_forward,
    gen_edge_weights,
    load_model,
    save_model,
    score,
    train_dgp,
)
from .scoring import MahalanobisScorer, decide, fit, md_score  # noqa: F401
from .metrics import auc, aupr, fpr95, overlap  # noqa: F401
