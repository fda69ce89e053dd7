"""anchorconv: weight-shared (anchored) CNNs on a self-contained autodiff core."""

import os as _os

# Cap BLAS threads before numpy first loads; must run before any submodule
# import pulls numpy in.
_threads = _os.environ.get("ANCHORCONV_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .arch import (  # noqa: E402
    Network,
    NetworkSpec,
    ParamGroup,
    ParamReport,
    build_free,
    build_mixed,
    build_network,
    build_plain,
    count_params,
    format_spec,
    parse_spec_file,
    parse_spec_text,
    without_batchnorm,
)
from .data import Dataset, channel_stats, load_cifar, load_cifar_dir, save_cifar, synthetic  # noqa: E402
from .errors import (  # noqa: E402
    AnchorConvError,
    CheckpointError,
    DataError,
    GraphError,
    ShapeError,
    SpecError,
)
from .ops import (  # noqa: E402
    BNState,
    add,
    batchnorm,
    conv2d,
    filter_mean,
    global_avg_pool,
    linear,
    maxpool2,
    relu,
    softmax_cross_entropy,
    weighted_sum,
)
from .tensor import Graph, ParamStore, Tensor, backward, randn, sgd_like_update, zeros  # noqa: E402
from .training import (  # noqa: E402
    AdagradState,
    EpochRecord,
    RunMetrics,
    TrainConfig,
    adagrad_step,
    augment_flip,
    channel_stats_normalize,
    evaluate,
    load_checkpoint,
    lr_at,
    normalize,
    save_checkpoint,
    top1_error,
    train,
)
from .viz import VizConfig, activation_maximize, read_ppm, write_ppm  # noqa: E402

__version__ = "0.1.0"
