"""Speech emotion recognition with a sub-sampled TDNN.

Pipeline: MFCC extraction, i-vector speaker adaptation, proxy-task
pretraining, bottleneck surgery with a fresh emotion head, and
session-based cross validation.
"""

__version__ = "0.1.0"

from .adaptation import (
    BwStats,
    DiagGmm,
    IVector,
    TvMatrix,
    accumulate_stats,
    append_adaptation,
    extract_ivector,
    train_total_variability,
    train_ubm,
)
from .evaluation import (
    EMOTION_CLASSES,
    ConfusionMatrix,
    EvalReport,
    FoldSpec,
    Manifest,
    classify_utterance,
    confusion_matrix,
    cross_validate,
    make_folds,
    unweighted_accuracy,
)
from .features import (
    FeatureMatrix,
    MelFilterbank,
    MfccConfig,
    Waveform,
    build_mel_filterbank,
    compute_mfcc,
    dct_ii,
    read_wav,
    write_wav,
)
from .tdnn import (
    ActivationTrace,
    Gradients,
    LayerSpec,
    Network,
    NetworkSpec,
    backward,
    forward,
    forward_bottleneck,
    default_spec,
    receptive_field,
)
from .training import (
    LabeledFrames,
    TrainConfig,
    TrainReport,
    cross_entropy,
    gradient_check,
    sgd_step,
    softmax,
    train,
)
from .transfer import (
    Checkpoint,
    FeatureFingerprint,
    FreezePolicy,
    attach_head,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
