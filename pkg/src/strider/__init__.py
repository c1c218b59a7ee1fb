"""strider: structured CNN pruning with lowered convolutions.

Channel, kernel, and intra-kernel strided sparsity; im2col lowering with
physical matrix shrinking under a shared per-source-channel stride and
offset; particle-filter (and evolutionary hybrid) search over pruning
masks; iterative prune-retrain; and L2-optimal fixed-point quantization.
"""

__version__ = "0.1.0"

from .arch import Arch, LayerSpec, parse_arch
from .datasets import LabeledSet, load_cifar10, load_mnist, synthetic_set
from .errors import StriderError
from .lowering import (
    LoweredPair,
    StridedPattern,
    conv_via_gemm,
    lower_dense,
    lower_strided,
    mac_count,
)
from .network import (
    Network,
    TrainConfig,
    TrainReport,
    evaluate_mcr,
    forward,
    init_network,
    train,
)
from .pruning import PruneMaskSet, apply_mask, compact, count_connections, expand_mask
from .quantization import QuantScheme, optimal_step, quantize_group, retrain_quantized
from .rng import Rng
from .search import SearchConfig, Swarm, run_search
from .tensor import gemm
