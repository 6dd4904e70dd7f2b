"""ECG beat extraction, a residual 1-D CNN arrhythmia classifier and MI transfer, on numpy."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor
from .evaluate import EvalReport, confusion_matrix, evaluate, export_embeddings, report_mi_metrics
from .model import (
    ArrhythmiaNet,
    ArrhythmiaNetConfig,
    CheckpointError,
    MiNet,
    attach_mi_head,
    load,
    load_backbone,
    parameter_digest,
    save,
)
from .preprocess import (
    beats_from_record,
    beats_from_signal,
    extract_beats,
    find_r_peaks,
    nominal_period,
    normalize,
    resample,
    split_windows,
)
from .train import (
    TrainConfig,
    balance_classes,
    lr_schedule,
    make_mitbih_split,
    make_ptb_split,
    train_arrhythmia,
    train_mi,
)
from .wfdb_io import (
    ARRHYTHMIA_CLASSES,
    MI_CLASSES,
    BeatSet,
    WfdbError,
    map_symbol_to_class,
    read_annotations,
    read_beats_csv,
    read_header,
    read_record,
    write_beats_csv,
)
