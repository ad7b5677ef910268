"""Command line interface: feature, adaptation, training and report commands.

Exit codes: 0 success, 2 usage, 3 bad config, 4 missing input, 1 runtime
failure. Failures print one machine-readable line: ERROR <kind>: <message>.
"""

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .adaptation import (
    SingularAccumulatorError,
    accumulate_stats,
    append_adaptation,
    extract_ivector,
    load_adaptation_model,
    save_adaptation_model,
    train_total_variability,
    train_ubm,
)
from .config import ConfigError, RunConfig, load_run_config, write_config_echo
from .datagen import frame_labels_from_segments, generate_corpus, read_segments
from .evaluation import (
    EMOTION_CLASSES,
    FoldResult,
    EvalReport,
    classify_utterance,
    confusion_matrix,
    format_confusion,
    cross_validate,
    read_manifest,
    unweighted_accuracy,
    weighted_accuracy,
    write_eval_report,
)
from .features import (
    ArchiveFormatError,
    FeatureMatrix,
    WavFormatError,
    compute_mfcc,
    read_feature_archive,
    read_wav,
    write_feature_archive,
)
from .tdnn import Network
from .training import (
    DivergenceError,
    LabeledFrames,
    train,
    write_train_report,
)
from .transfer import (
    Checkpoint,
    CheckpointFormatError,
    FeatureFingerprint,
    FingerprintMismatchError,
    FreezePolicy,
    attach_head,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .training import gradient_check

DEFAULT_TAPS = "tdnn12,tdnn13,prefinal"


def _limit_threads(n) -> None:
    """Best-effort cap on BLAS worker threads."""
    if n is None:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(n))
    except ImportError:
        pass


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(out, cfg)
    return out


def _load_archive(path):
    mats = read_feature_archive(path)
    return mats, {m.utterance_id: m for m in mats}


def _features_for(by_id: dict, utt_id: str) -> FeatureMatrix:
    try:
        return by_id[utt_id]
    except KeyError:
        raise ValueError(f"no features for utterance {utt_id!r} in the archive") from None


def _fingerprint_for(cfg: RunConfig, feature_dim: int) -> FeatureFingerprint:
    ivector_dim = feature_dim - cfg.mfcc.num_ceps
    if ivector_dim < 0:
        raise ValueError(
            f"archive dim {feature_dim} is smaller than num_ceps {cfg.mfcc.num_ceps}"
        )
    return FeatureFingerprint.from_configs(cfg.mfcc, ivector_dim)


def _emotion_items(manifest, by_id) -> list:
    return [
        LabeledFrames.from_utterance_label(
            _features_for(by_id, r.utt_id), manifest.label_index(r)
        )
        for r in manifest.rows
    ]


def _scratch_checkpoint(cfg: RunConfig, feature_dim: int) -> Checkpoint:
    """Randomly initialized network with the pretraining architecture."""
    spec = cfg.network.build_spec(feature_dim, max(2, cfg.datagen.num_phones))
    net = Network.initialize(spec, cfg.seed)
    fingerprint = _fingerprint_for(cfg, feature_dim)
    return Checkpoint(net, fingerprint, task="scratch-init", epochs=0, seed=cfg.seed)


def _resolve_checkpoint(args, cfg: RunConfig, feature_dim: int) -> Checkpoint:
    if getattr(args, "scratch", False):
        return _scratch_checkpoint(cfg, feature_dim)
    if not args.checkpoint:
        raise ValueError("either --checkpoint or --scratch is required")
    ck = load_checkpoint(args.checkpoint)
    from .transfer import ensure_compatible

    ensure_compatible(ck, _fingerprint_for(cfg, feature_dim))
    return ck


def cmd_features_extract(args) -> int:
    cfg = load_run_config(args.config)
    manifest = read_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    mats = []
    for row in manifest.rows:
        waveform = read_wav(row.path)
        mats.append(compute_mfcc(waveform, cfg.mfcc, utterance_id=row.utt_id))
    archive = out / "features.feat"
    write_feature_archive(archive, mats)
    print(f"extracted {len(mats)} utterances ({mats[0].dim}-dim) -> {archive}")
    return 0


def cmd_adapt_train(args) -> int:
    cfg = load_run_config(args.config)
    mats, _ = _load_archive(args.features)
    out = _prepare_out(args, cfg)
    ad = cfg.adaptation
    if ad.ivector_dim < 1:
        raise ValueError("adaptation.ivector_dim must be >= 1 to train a model")
    total = sum(m.num_frames for m in mats)
    step = max(1, -(-total // ad.max_frames))  # ceil division
    ubm_data = (
        mats
        if step == 1
        else [FeatureMatrix(m.frames[::step], m.utterance_id) for m in mats]
    )
    gmm = train_ubm(ubm_data, ad.num_components, ad.ubm_iters, cfg.seed)
    stats = [accumulate_stats(gmm, m) for m in mats]
    tv = train_total_variability(stats, gmm, ad.ivector_dim, ad.tv_iters, cfg.seed)
    model = out / "adaptation.ivex"
    save_adaptation_model(model, gmm, tv)
    print(
        f"trained {ad.num_components}-component UBM and {ad.ivector_dim}-dim "
        f"subspace on {total} frames -> {model}"
    )
    return 0


def cmd_adapt_apply(args) -> int:
    cfg = load_run_config(args.config)
    mats, _ = _load_archive(args.features)
    gmm, tv = load_adaptation_model(args.model)
    out = _prepare_out(args, cfg)
    adapted = []
    for m in mats:
        stats = accumulate_stats(gmm, m)
        iv = extract_ivector(gmm, tv, stats, scope=m.utterance_id)
        adapted.append(append_adaptation(m, iv))
    archive = out / "features_adapted.feat"
    write_feature_archive(archive, adapted)
    print(
        f"appended {tv.ivector_dim}-dim adaptation vectors to {len(adapted)} "
        f"utterances -> {archive}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    manifest = read_manifest(args.manifest)
    segments = read_segments(args.segments)
    mats, by_id = _load_archive(args.features)
    out = _prepare_out(args, cfg)
    shift_s = cfg.mfcc.frame_shift_ms / 1000.0
    length_s = cfg.mfcc.frame_length_ms / 1000.0
    items = []
    num_phones = 2
    for row in manifest.rows:
        feats = _features_for(by_id, row.utt_id)
        if row.utt_id not in segments:
            raise ValueError(f"no segments for utterance {row.utt_id!r}")
        labels = frame_labels_from_segments(
            segments[row.utt_id], feats.num_frames, shift_s, length_s
        )
        num_phones = max(num_phones, int(labels.max()) + 1)
        items.append(LabeledFrames(feats, labels))
    feature_dim = mats[0].dim
    spec = cfg.network.build_spec(feature_dim, num_phones)
    fingerprint = _fingerprint_for(cfg, feature_dim)
    ck, report = pretrain(items, spec, cfg.pretrain, fingerprint)
    save_checkpoint(ck, out / "checkpoint.ck")
    write_train_report(out / "train_report.csv", report)
    final_acc = report.frame_accuracies[-1] if report.frame_accuracies else float("nan")
    print(
        f"pretrained {spec.num_tdnn_layers}-layer network on {len(items)} "
        f"utterances, final frame acc {final_acc:.3f} -> {out / 'checkpoint.ck'}"
    )
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args.config)
    manifest = read_manifest(args.manifest)
    mats, by_id = _load_archive(args.features)
    out = _prepare_out(args, cfg)
    ck = _resolve_checkpoint(args, cfg, mats[0].dim)
    net = attach_head(
        ck,
        cfg.tap,
        len(EMOTION_CLASSES),
        hidden_dim=cfg.network.head_hidden_dim,
        seed=cfg.seed + 7919,
    )
    policy = (
        FreezePolicy.freeze_pretrained(net)
        if cfg.freeze_pretrained
        else FreezePolicy.train_all()
    )
    policy.validate(net)
    items = _emotion_items(manifest, by_id)
    tuned, report = train(
        net, items, cfg.finetune, frozen_layers=policy.frozen_layers
    )
    model = Checkpoint(
        tuned,
        ck.fingerprint,
        task="emotion-finetune",
        epochs=cfg.finetune.epochs,
        seed=cfg.seed,
    )
    save_checkpoint(model, out / "model.ck")
    write_train_report(out / "train_report.csv", report)
    final_acc = report.frame_accuracies[-1] if report.frame_accuracies else float("nan")
    print(
        f"fine-tuned at tap {cfg.tap} on {len(items)} utterances, final frame "
        f"acc {final_acc:.3f} -> {out / 'model.ck'}"
    )
    return 0


def _evaluate_model(net, rows, manifest, by_id):
    preds, refs = [], []
    for row in rows:
        cls, _ = classify_utterance(net, _features_for(by_id, row.utt_id))
        preds.append(cls)
        refs.append(manifest.label_index(row))
    k = len(EMOTION_CLASSES)
    return (
        unweighted_accuracy(preds, refs, k),
        weighted_accuracy(preds, refs),
        confusion_matrix(preds, refs, k),
    )


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    manifest = read_manifest(args.manifest)
    mats, by_id = _load_archive(args.features)
    out = _prepare_out(args, cfg)

    if args.compare_taps:
        if not args.test_session:
            raise ValueError("--compare-taps requires --test-session")
        if args.test_session not in manifest.sessions():
            raise ValueError(f"session {args.test_session!r} not in manifest")
        ck = _resolve_checkpoint(args, cfg, mats[0].dim)
        train_sessions = [s for s in manifest.sessions() if s != args.test_session]
        train_rows = manifest.rows_for_sessions(train_sessions)
        test_rows = manifest.rows_for_sessions([args.test_session])
        items = [
            LabeledFrames.from_utterance_label(
                _features_for(by_id, r.utt_id), manifest.label_index(r)
            )
            for r in train_rows
        ]
        taps = [t.strip() for t in args.taps.split(",") if t.strip()]
        table = []
        for tap in taps:
            net = attach_head(
                ck,
                tap,
                len(EMOTION_CLASSES),
                hidden_dim=cfg.network.head_hidden_dim,
                seed=cfg.seed + 7919,
            )
            policy = (
                FreezePolicy.freeze_pretrained(net)
                if cfg.freeze_pretrained
                else FreezePolicy.train_all()
            )
            policy.validate(net)
            tuned, _ = train(
                net, items, cfg.finetune, frozen_layers=policy.frozen_layers
            )
            ua, wa, _ = _evaluate_model(tuned, test_rows, manifest, by_id)
            table.append((tap, ua, wa))
        path = out / "tap_comparison.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["tap", "test_session", "ua", "wa"])
            for tap, ua, wa in table:
                writer.writerow([tap, args.test_session, f"{ua:.6f}", f"{wa:.6f}"])
        for tap, ua, wa in table:
            print(f"tap {tap:10s} session {args.test_session}: UA {ua:.3f} WA {wa:.3f}")
        print(f"wrote {path}")
        return 0

    if not args.model:
        raise ValueError("either --model or --compare-taps is required")
    ck = load_checkpoint(args.model)
    from .transfer import ensure_compatible

    ensure_compatible(ck, _fingerprint_for(cfg, mats[0].dim))
    if ck.network.spec.head_dim != len(EMOTION_CLASSES):
        raise ValueError(
            f"model head has {ck.network.spec.head_dim} classes, expected "
            f"{len(EMOTION_CLASSES)}"
        )
    if args.test_session:
        if args.test_session not in manifest.sessions():
            raise ValueError(f"session {args.test_session!r} not in manifest")
        rows = manifest.rows_for_sessions([args.test_session])
        session_name = args.test_session
    else:
        rows = manifest.rows
        session_name = "all"
    ua, wa, cm = _evaluate_model(ck.network, rows, manifest, by_id)
    report = EvalReport([FoldResult(0, session_name, ua, wa, cm)])
    write_eval_report(out / "evaluate_report.csv", report)
    with open(out / "confusion.txt", "w", encoding="utf-8") as fh:
        fh.write(format_confusion(cm.normalized()))
    print(f"session {session_name}: UA {ua:.3f} WA {wa:.3f} ({len(rows)} utterances)")
    return 0


def cmd_cross_validate(args) -> int:
    cfg = load_run_config(args.config)
    manifest = read_manifest(args.manifest)
    mats, by_id = _load_archive(args.features)
    out = _prepare_out(args, cfg)
    ck = _resolve_checkpoint(args, cfg, mats[0].dim)
    sample_net = attach_head(ck, cfg.tap, len(EMOTION_CLASSES))
    policy = (
        FreezePolicy.freeze_pretrained(sample_net)
        if cfg.freeze_pretrained
        else FreezePolicy.train_all()
    )
    report = cross_validate(
        manifest,
        by_id,
        ck,
        cfg.tap,
        cfg.finetune,
        policy=policy,
        hidden_dim=cfg.network.head_hidden_dim,
        config_echo=cfg.resolved,
    )
    write_eval_report(out / "eval_report.csv", report)
    with open(out / "confusion.txt", "w", encoding="utf-8") as fh:
        fh.write(format_confusion(report.mean_confusion))
    for fold in report.folds:
        print(
            f"fold {fold.fold} (test {fold.test_session}): "
            f"UA {fold.ua:.3f} WA {fold.wa:.3f}"
        )
    print(f"mean UA {report.mean_ua:.3f} WA {report.mean_wa:.3f}")
    return 0


GRADCHECK_PROBE_SCALE = 20.0


def draw_gradcheck_sample(net: Network, seed: int, frames: int, step: float) -> LabeledFrames:
    """Deterministically draw probe frames whose rectifier pre-activations
    stay clear of zero by 2x the finite-difference step; central differences
    are invalid across a kink. Probes are drawn at a large amplitude because
    the zero-bias rectifier stack is positively homogeneous: scaling the
    input scales every pre-activation without changing which gradients are
    being verified, and narrow nets attenuate activations with depth."""
    from .tdnn import kink_margin

    input_dim = net.spec.input_dim
    head_dim = net.spec.head_dim
    for attempt in range(100):
        rng = np.random.default_rng(seed + 1 + attempt)
        feats = FeatureMatrix(
            GRADCHECK_PROBE_SCALE * rng.standard_normal((frames, input_dim)),
            "gradcheck",
        )
        if kink_margin(net, feats) > 2.0 * step:
            labels = rng.integers(0, head_dim, size=frames)
            return LabeledFrames(feats, labels)
    raise RuntimeError("could not draw a kink-free gradient-check sample")


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config)
    from dataclasses import replace

    network_cfg = replace(cfg.network, width_factor=args.width_factor)
    input_dim = cfg.mfcc.num_ceps + cfg.adaptation.ivector_dim
    spec = network_cfg.build_spec(input_dim, len(EMOTION_CLASSES))
    seed = cfg.seed if args.seed is None else args.seed
    net = Network.initialize(spec, seed)
    sample = draw_gradcheck_sample(net, seed, args.frames, step=1e-4)
    err = gradient_check(net, sample, step=1e-4)
    ok = err < args.threshold
    print(
        f"gradcheck width_factor={args.width_factor} frames={args.frames} "
        f"max_rel_err={err:.3e} threshold={args.threshold:.0e} "
        f"{'PASS' if ok else 'FAIL'}"
    )
    return 0 if ok else 1


def cmd_datagen(args) -> int:
    cfg = load_run_config(args.config)
    out = _prepare_out(args, cfg)
    manifest = generate_corpus(cfg.datagen, out)
    proxy = cfg.datagen.num_sessions * cfg.datagen.phone_utterances_per_session
    print(
        f"generated {len(manifest.rows)} emotion and {proxy} proxy utterances "
        f"in {out}"
    )
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args.config)
    out = _prepare_out(args, cfg)
    from .reporting import render_report

    written = render_report(args.eval_report, args.train_report, out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdnnser",
        description=(
            "Speech emotion recognition with a sub-sampled TDNN: feature "
            "extraction, speaker adaptation, proxy pretraining, transfer "
            "fine-tuning, and session-fold evaluation."
        ),
    )
    parser.add_argument(
        "--threads", type=int, default=None, help="cap BLAS worker threads"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, manifest=False, features=False, out=True):
        p.add_argument("--config", default=None, help="JSON run config")
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest CSV")
        if features:
            p.add_argument("--features", required=True, help="feature archive")
        if out:
            p.add_argument("--out", required=True, help="artifact directory")

    feats = sub.add_parser("features", help="feature extraction")
    fsub = feats.add_subparsers(dest="action", metavar="action")
    fx = fsub.add_parser("extract", help="compute MFCCs for a manifest")
    common(fx, manifest=True)
    fx.set_defaults(func=cmd_features_extract)

    adapt = sub.add_parser("adapt", help="speaker adaptation model")
    asub = adapt.add_subparsers(dest="action", metavar="action")
    at = asub.add_parser("train", help="train UBM and total-variability matrix")
    common(at, features=True)
    at.set_defaults(func=cmd_adapt_train)
    aa = asub.add_parser("apply", help="append i-vectors to features")
    common(aa, features=True)
    aa.add_argument("--model", required=True, help="adaptation model file")
    aa.set_defaults(func=cmd_adapt_apply)

    pre = sub.add_parser("pretrain", help="train the proxy-task network")
    common(pre, manifest=True, features=True)
    pre.add_argument("--segments", required=True, help="frame-label segments CSV")
    pre.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="attach an emotion head and fine-tune")
    common(ft, manifest=True, features=True)
    ft.add_argument("--checkpoint", default=None, help="pretrained checkpoint")
    ft.add_argument(
        "--scratch", action="store_true", help="start from random initialization"
    )
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("evaluate", help="score a model or compare taps")
    common(ev, manifest=True, features=True)
    ev.add_argument("--model", default=None, help="fine-tuned model checkpoint")
    ev.add_argument("--test-session", default=None, help="session to score")
    ev.add_argument(
        "--compare-taps",
        action="store_true",
        help="fine-tune and score once per tap on a held-out session",
    )
    ev.add_argument("--checkpoint", default=None, help="pretrained checkpoint")
    ev.add_argument("--scratch", action="store_true", help=argparse.SUPPRESS)
    ev.add_argument("--taps", default=DEFAULT_TAPS, help="comma-separated taps")
    ev.set_defaults(func=cmd_evaluate)

    cv = sub.add_parser("cross-validate", help="session-fold cross validation")
    common(cv, manifest=True, features=True)
    cv.add_argument("--checkpoint", default=None, help="pretrained checkpoint")
    cv.add_argument(
        "--scratch", action="store_true", help="start folds from random init"
    )
    cv.set_defaults(func=cmd_cross_validate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--config", default=None, help="JSON run config")
    gc.add_argument(
        "--width-factor", type=float, default=1.0 / 128.0, help="hidden width scale"
    )
    gc.add_argument("--frames", type=int, default=10, help="random input frames")
    gc.add_argument("--seed", type=int, default=None, help="override config seed")
    gc.add_argument(
        "--threshold", type=float, default=1e-5, help="max relative error allowed"
    )
    gc.set_defaults(func=cmd_gradcheck)

    dg = sub.add_parser("datagen", help="generate the synthetic corpus")
    common(dg)
    dg.set_defaults(func=cmd_datagen)

    rp = sub.add_parser("report", help="render figures from report CSVs")
    common(rp)
    rp.add_argument("--eval-report", required=True, help="eval_report.csv path")
    rp.add_argument("--train-report", default=None, help="train_report.csv path")
    rp.set_defaults(func=cmd_report)

    return parser


def _fail(kind: str, message, code: int) -> int:
    print(f"ERROR {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help(sys.stderr)
        return 2
    _limit_threads(args.threads)
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        return _fail("config", exc, 3)
    except FileNotFoundError as exc:
        return _fail("missing-input", exc.filename or exc, 4)
    except (
        WavFormatError,
        ArchiveFormatError,
        CheckpointFormatError,
        FingerprintMismatchError,
        SingularAccumulatorError,
        DivergenceError,
        ValueError,
        RuntimeError,
    ) as exc:
        return _fail("runtime", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
