"""Count Sketch compressed federated learning.

The sketch (``sketchfed.sketch``) and sliding-window structure
(``sketchfed.sliding``) are usable on their own. ``sketchfed.fetchsgd`` holds
the sketched server optimizer, ``sketchfed.baselines`` FedAvg and local top-k,
and ``sketchfed.sim`` the simulator that drives them.
"""

from .errors import (
    AggregationError,
    BoundsError,
    ConfigurationError,
    DataError,
    IncompatibleSketchError,
    ParameterError,
    PartitionError,
    ShapeError,
    SketchFedError,
    StateError,
)
from .sketch import CountSketch, SketchConfig, SparseUpdate, sketch_size, sketch_vector
from .sliding import SlidingWindowSketch
from .fetchsgd import (
    FetchConfig,
    FetchServerState,
    TrueTopK,
    apply_sparse_update,
    client_encode,
    server_aggregate,
    server_step,
)
from .baselines import FedAvgConfig, LocalTopKConfig, LRSchedule
from .models import MLP, LeastSquares, Logistic, Quadratic, loss_and_grad, smoothness_constant
from .sim import ClientShard, Federation, RoundConfig, RoundMetrics, run_round, simulate

__version__ = "0.1.0"
