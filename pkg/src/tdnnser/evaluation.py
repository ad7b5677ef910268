"""Utterance scoring, UA/confusion metrics, and session-based cross validation."""

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureMatrix
from .tdnn import Network, forward
from .training import LabeledFrames, TrainConfig, softmax
from .transfer import Checkpoint, FreezePolicy, attach_head, finetune

EMOTION_CLASSES = ("ang", "exc", "neu", "sad")


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    path: str
    session: str
    speaker: str
    label: str


@dataclass
class Manifest:
    """Catalog of utterances: id, audio path, session, speaker, label."""

    rows: list

    def __post_init__(self):
        ids = [r.utt_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest utterance ids must be unique")

    def sessions(self) -> list:
        return sorted({r.session for r in self.rows})

    def rows_for_sessions(self, sessions) -> list:
        wanted = set(sessions)
        return [r for r in self.rows if r.session in wanted]

    def label_index(self, row: ManifestRow) -> int:
        if row.label not in EMOTION_CLASSES:
            raise ValueError(
                f"utterance {row.utt_id!r} has label {row.label!r}, "
                f"expected one of {EMOTION_CLASSES}"
            )
        return EMOTION_CLASSES.index(row.label)


def read_manifest(path) -> Manifest:
    """Read a CSV manifest with header utt_id,path,session,speaker,label.
    Relative audio paths are resolved against the manifest's directory."""
    base = Path(path).parent
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["utt_id", "path", "session", "speaker", "label"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: manifest header must be {','.join(expected)}")
        for rec in reader:
            audio = rec["path"]
            if not Path(audio).is_absolute():
                audio = str(base / audio)
            rows.append(
                ManifestRow(rec["utt_id"], audio, rec["session"], rec["speaker"], rec["label"])
            )
    return Manifest(rows)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id", "path", "session", "speaker", "label"])
        for r in manifest.rows:
            writer.writerow([r.utt_id, r.path, r.session, r.speaker, r.label])


@dataclass(frozen=True)
class FoldSpec:
    """(train sessions, test session) pairs; each session tested once."""

    folds: tuple

    def __post_init__(self):
        tests = [test for _, test in self.folds]
        if len(set(tests)) != len(tests):
            raise ValueError("each session may appear only once as test")
        for train, test in self.folds:
            if test in train:
                raise ValueError("train and test sessions must be disjoint")


def make_folds(manifest: Manifest) -> FoldSpec:
    """One fold per distinct session: fold i tests session i, trains on the rest."""
    sessions = manifest.sessions()
    if len(sessions) < 2:
        raise ValueError("cross validation needs at least 2 sessions")
    folds = tuple(
        (tuple(s for s in sessions if s != test), test) for test in sessions
    )
    return FoldSpec(folds)


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are reference classes, columns predictions."""

    counts: np.ndarray
    class_names: tuple = EMOTION_CLASSES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    def normalized(self) -> np.ndarray:
        """Row-normalized view; all-zero rows stay zero."""
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        safe = np.maximum(totals, 1.0)
        return self.counts / safe

    def recalls(self) -> np.ndarray:
        return np.diag(self.normalized())


def aggregate_scores(prob_rows: np.ndarray):
    """Sum per-frame probability rows; argmax with lowest-index tie-break."""
    prob_rows = np.asarray(prob_rows, dtype=np.float64)
    if prob_rows.ndim != 2 or prob_rows.shape[0] < 1:
        raise ValueError("need at least one frame of scores")
    score = prob_rows.sum(axis=0)
    return int(np.argmax(score)), score


def classify_utterance(net: Network, x: FeatureMatrix):
    """Summed-softmax utterance decision: (class index, score vector)."""
    trace = forward(net, x, mode="dense")
    return aggregate_scores(softmax(trace.logits))


def unweighted_accuracy(preds, refs, k: int) -> float:
    """Macro-averaged recall over the classes present in refs."""
    preds = np.asarray(preds, dtype=int)
    refs = np.asarray(refs, dtype=int)
    if preds.shape != refs.shape or preds.size == 0:
        raise ValueError("preds and refs must be equal-length and non-empty")
    recalls = []
    for c in range(k):
        mask = refs == c
        if not mask.any():
            warnings.warn(f"class {c} absent from references; excluded from UA")
            continue
        recalls.append((preds[mask] == c).mean())
    return float(np.mean(recalls))


def weighted_accuracy(preds, refs) -> float:
    """Overall fraction of correct utterances."""
    preds = np.asarray(preds, dtype=int)
    refs = np.asarray(refs, dtype=int)
    if preds.shape != refs.shape or preds.size == 0:
        raise ValueError("preds and refs must be equal-length and non-empty")
    return float((preds == refs).mean())


def confusion_matrix(preds, refs, k: int, class_names=EMOTION_CLASSES) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=int)
    refs = np.asarray(refs, dtype=int)
    if preds.shape != refs.shape or preds.size == 0:
        raise ValueError("preds and refs must be equal-length and non-empty")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (refs, preds), 1)
    return ConfusionMatrix(counts, tuple(class_names[:k]))


def average_normalized(matrices) -> np.ndarray:
    """Fold averaging averages the row-normalized matrices."""
    views = [m.normalized() for m in matrices]
    return np.mean(views, axis=0)


@dataclass
class FoldResult:
    fold: int
    test_session: str
    ua: float
    wa: float
    confusion: ConfusionMatrix


@dataclass
class EvalReport:
    """Per-fold metrics plus fold-averaged summaries."""

    folds: list
    config_echo: dict = field(default_factory=dict)

    @property
    def mean_ua(self) -> float:
        return float(np.mean([f.ua for f in self.folds]))

    @property
    def mean_wa(self) -> float:
        return float(np.mean([f.wa for f in self.folds]))

    @property
    def mean_confusion(self) -> np.ndarray:
        return average_normalized([f.confusion for f in self.folds])

    @property
    def per_class_recalls(self) -> np.ndarray:
        return np.diag(self.mean_confusion)


def _finetune_fold(
    ck: Checkpoint,
    tap,
    train_items,
    cfg: TrainConfig,
    policy: FreezePolicy,
    hidden_dim: int,
    attach_seed: int,
    num_classes: int,
) -> Network:
    net = attach_head(ck, tap, num_classes, hidden_dim=hidden_dim, seed=attach_seed)
    return finetune(net, train_items, policy, cfg)


def cross_validate(
    manifest: Manifest,
    features_by_id: dict,
    pretrain_ck: Checkpoint,
    tap,
    cfg: TrainConfig,
    policy: FreezePolicy = FreezePolicy(),
    hidden_dim: int = 256,
    num_classes: int = len(EMOTION_CLASSES),
    config_echo: dict | None = None,
) -> EvalReport:
    """Session-based k-fold CV: per fold, attach a fresh head to the shared
    pretrained checkpoint, fine-tune on the train sessions, and score the
    held-out session by summed-softmax classification. Fully seeded."""
    folds = make_folds(manifest)
    results = []
    for fold_idx, (train_sessions, test_session) in enumerate(folds.folds):
        train_rows = manifest.rows_for_sessions(train_sessions)
        test_rows = manifest.rows_for_sessions([test_session])
        train_labels = {manifest.label_index(r) for r in train_rows}
        if len(train_labels) < num_classes:
            warnings.warn(
                f"fold {fold_idx}: training sessions miss "
                f"{num_classes - len(train_labels)} class(es); continuing"
            )
        train_items = [
            LabeledFrames.from_utterance_label(
                features_by_id[r.utt_id], manifest.label_index(r)
            )
            for r in train_rows
        ]
        net = _finetune_fold(
            pretrain_ck,
            tap,
            train_items,
            cfg,
            policy,
            hidden_dim,
            attach_seed=cfg.seed + 7919 * (fold_idx + 1),
            num_classes=num_classes,
        )
        preds, refs = [], []
        for r in test_rows:
            cls, _ = classify_utterance(net, features_by_id[r.utt_id])
            preds.append(cls)
            refs.append(manifest.label_index(r))
        results.append(
            FoldResult(
                fold=fold_idx,
                test_session=test_session,
                ua=unweighted_accuracy(preds, refs, num_classes),
                wa=weighted_accuracy(preds, refs),
                confusion=confusion_matrix(preds, refs, num_classes),
            )
        )
    return EvalReport(results, config_echo=dict(config_echo or {}))


def epochs_to_threshold(
    net: Network,
    train_items,
    val_features,
    val_refs,
    cfg: TrainConfig,
    policy: FreezePolicy,
    threshold: float,
) -> int | None:
    """Fine-tune epoch by epoch and return the first epoch count (1-based) at
    which held-out UA reaches the threshold, or None within cfg.epochs."""
    num_classes = net.spec.head_dim
    reached = []

    def check(epoch, loss, acc, live_net):
        preds = [classify_utterance(live_net, x)[0] for x in val_features]
        ua = unweighted_accuracy(preds, val_refs, num_classes)
        if ua >= threshold:
            reached.append(epoch + 1)
            return True
        return False

    finetune(net, train_items, policy, cfg, on_epoch=check)
    return reached[0] if reached else None


def write_eval_report(path, report: EvalReport) -> None:
    """CSV: fold, test_session, ua, wa, then k^2 row-normalized cells
    row-major; a final row holds the fold means."""
    names = report.folds[0].confusion.class_names
    k = len(names)
    header = ["fold", "test_session", "ua", "wa"] + [
        f"n_{names[i]}_{names[j]}" for i in range(k) for j in range(k)
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for f in report.folds:
            cells = f.confusion.normalized().ravel()
            writer.writerow(
                [f.fold, f.test_session, f"{f.ua:.6f}", f"{f.wa:.6f}"]
                + [f"{c:.6f}" for c in cells]
            )
        mean_cells = report.mean_confusion.ravel()
        writer.writerow(
            ["mean", "all", f"{report.mean_ua:.6f}", f"{report.mean_wa:.6f}"]
            + [f"{c:.6f}" for c in mean_cells]
        )


def format_confusion(matrix: np.ndarray, class_names=EMOTION_CLASSES) -> str:
    """Plain-text block for a (possibly fold-averaged) row-normalized matrix."""
    width = max(len(n) for n in class_names) + 2
    lines = ["ref\\pred".ljust(width) + "".join(n.rjust(8) for n in class_names)]
    for i, name in enumerate(class_names):
        cells = "".join(f"{matrix[i, j]:8.3f}" for j in range(len(class_names)))
        lines.append(name.ljust(width) + cells)
    return "\n".join(lines) + "\n"
