"""Pixel-level entropic OT distances, cross-domain retrieval and convex feature merging."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DataError,
    EmptyIndexError,
    FormatError,
    IoError,
    ManifestError,
    MarginalError,
    NumericalError,
    ParamError,
    PixotError,
    PoolError,
    RowError,
    ShapeError,
    SizeError,
    TruncationError,
)
from .features import (  # noqa: E402
    Domain,
    FeatureMap,
    Manifest,
    ManifestItem,
    avg_pool,
    make_manifest,
    read_feature_map,
    read_manifest,
    read_npy,
    write_feature_map,
    write_manifest,
)
from .ot import (  # noqa: E402
    Mode,
    OTParams,
    OTResult,
    TransportPlan,
    brute_force_ot,
    cost_matrix,
    exact_ot_assignment,
    mean_lower_bound,
    ot_distance,
    sinkhorn,
    uniform_marginal,
)
from .retrieval import (  # noqa: E402
    FeatureIndex,
    RetrievalResult,
    build_index,
    index_from_maps,
    load_index,
    query_exhaustive,
    query_pruned,
    save_index,
)
from .merge import (  # noqa: E402
    MergeConfig,
    MergedSet,
    batch_merge,
    convex_merge,
    cost_report,
    split_dataset,
    write_merged_set,
)
