"""Command-line entry point wiring all modules into reproducible experiments.

    scdk <subcommand> --config <path> [--set section.key=value ...] --out <dir>

Every run writes a resolved-config snapshot into the output directory.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
SCDK_THREADS caps worker parallelism for the sweep.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, write_snapshot
from .ctc import extract_spikes, write_spike_csv
from .decode import read_decode_file, write_decode_file
from .metrics import (
    LatencyRecord,
    corpus_error_rate,
    emission_time_ms,
    ftd_ltd,
    percentile,
    spike_lag,
    write_latency_detail,
    write_metrics_report,
)
from .models import FULL, AsrModel
from .nn_core import CheckpointError, load_checkpoint, load_into_store, save_checkpoint
from .synthdata import CorpusFormatError, generate_corpus, read_corpus_file, write_corpus_file
from .trainer import (
    DivergenceError,
    RunManifest,
    evaluate_model,
    latency_summary,
    student_manifest,
    sweep_pair,
    train_student,
    train_teacher,
    write_loss_log,
    write_sweep_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class DataError(ValueError):
    """Input data (corpus, checkpoint, decode file) is missing or inconsistent."""


def _load_corpus(cfg: ExperimentConfig, path: str):
    try:
        samples, header = read_corpus_file(path)
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    c = cfg["corpus"]
    if header["V"] != c["vocab_size"]:
        raise DataError(f"{path}: corpus vocab {header['V']} != configured {c['vocab_size']}")
    if header["DIM"] != cfg["encoder"]["input_dim"]:
        raise DataError(
            f"{path}: corpus dim {header['DIM']} != encoder input_dim {cfg['encoder']['input_dim']}"
        )
    return samples


def _load_model(cfg: ExperimentConfig, chunk_size, ckpt_path: str) -> AsrModel:
    model = AsrModel(
        cfg.encoder_config(chunk_size=chunk_size),
        cfg["corpus"]["vocab_size"],
        cfg["decoder"]["heads"],
    )
    load_into_store(model.store, ckpt_path)
    return model


def _effective_chunk(chunk, utt, subsample: int) -> int:
    return chunk if chunk != FULL else max(1, len(utt.features) // subsample)


# ------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> None:
    for split in ("train", "test"):
        corpus_cfg = cfg.corpus_config(split)
        samples = generate_corpus(corpus_cfg, id_prefix=split)
        write_corpus_file(samples, str(out / f"{split}.corpus"), corpus_cfg)


def cmd_train_teacher(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_corpus(cfg, cfg.path("train_corpus"))
    manifest = RunManifest(
        phase="teacher",
        enc_cfg=cfg.teacher_encoder_config(),
        train_cfg=cfg.train_config(),
        weights=cfg.loss_weights(alpha=0.0),
        vocab_size=cfg["corpus"]["vocab_size"],
        dec_heads=cfg["decoder"]["heads"],
    )
    model = train_teacher(corpus, manifest)
    save_checkpoint(model.store, str(out / "teacher.ckpt"))
    with open(out / "teacher_loss.csv", "w") as f:
        write_loss_log(f, manifest.loss_log)


def cmd_train_student(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_corpus(cfg, cfg.path("train_corpus"))
    alpha = cfg["loss"]["alpha"]
    tab = cfg.tab_config() if alpha > 0 else None
    manifest = student_manifest(
        alpha=alpha,
        tab=tab,
        enc_cfg=cfg.encoder_config(),
        train_cfg=cfg.train_config(),
        lam=cfg["loss"]["lam"],
        vocab_size=cfg["corpus"]["vocab_size"],
        teacher_ckpt=cfg.path("teacher_ckpt") if alpha > 0 else "",
        dec_heads=cfg["decoder"]["heads"],
    )
    model = train_student(corpus, manifest)
    save_checkpoint(model.store, str(out / "student.ckpt"))
    with open(out / "student_loss.csv", "w") as f:
        write_loss_log(f, manifest.loss_log)


def _sweep_worker(payload) -> dict[str, float]:
    values, tab_ms, alpha = payload
    cfg = ExperimentConfig(values=values)
    train_corpus = _load_corpus(cfg, cfg.path("train_corpus"))
    test_corpus = _load_corpus(cfg, cfg.path("test_corpus"))
    teacher_ckpt = cfg.path("teacher_ckpt")
    teacher = _load_model(cfg, FULL, teacher_ckpt)
    teacher.store.freeze_all()
    return sweep_pair(
        train_corpus,
        test_corpus,
        teacher,
        teacher_ckpt,
        tab_ms,
        alpha,
        cfg.tab_config(tab_ms),
        cfg.encoder_config(),
        cfg.train_config(),
        cfg["loss"]["lam"],
        cfg["decode"]["beam"],
        cfg["decode"]["rescore_ctc_weight"],
        cfg.frame_duration_ms(),
        cfg["decoder"]["heads"],
    )


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> None:
    pairs = [(tab_ms, alpha) for tab_ms in cfg["sweep"]["tab_ms"] for alpha in cfg["sweep"]["alpha"]]
    payloads = [(cfg.values, tab_ms, alpha) for tab_ms, alpha in pairs]
    threads = int(os.environ.get("SCDK_THREADS", "1"))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(payloads))) as pool:
            rows = list(pool.map(_sweep_worker, payloads))
    else:
        rows = [_sweep_worker(p) for p in payloads]
    with open(out / "sweep.csv", "w") as f:
        write_sweep_csv(f, rows)


def cmd_decode(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_corpus(cfg, cfg.path("test_corpus"))
    mode = cfg["decode"]["mode"]
    ckpt_path = cfg.path("student_ckpt")
    if mode == "rescoring":
        tensors = load_checkpoint(ckpt_path)
        if not any(name.startswith("dec.") for name in tensors):
            raise DataError(f"{ckpt_path}: rescoring mode needs a decoder, checkpoint has none")
    model = _load_model(cfg, cfg.decode_chunk_size(), ckpt_path)
    rescore_weight = cfg["decode"]["rescore_ctc_weight"] if mode == "rescoring" else None
    result = evaluate_model(
        model,
        corpus,
        cfg["decode"]["beam"],
        rescore_weight,
        cfg.frame_duration_ms(),
        latency_mode=mode,
    )
    rows = result.streaming_rows if mode == "streaming" else result.rescoring_rows
    with open(out / "decode.txt", "w") as f:
        write_decode_file(f, rows)
    with open(out / "metrics.csv", "w") as f:
        write_metrics_report(f, result.metrics)
    with open(out / "latency.csv", "w") as f:
        write_latency_detail(f, result.latency)


def cmd_eval(cfg: ExperimentConfig, out: Path) -> None:
    """Recompute the metrics report from an existing decode output file."""
    corpus = _load_corpus(cfg, cfg.path("test_corpus"))
    by_id = {utt.utt_id: utt for utt in corpus}
    decode_path = cfg.path("decode_file")
    try:
        with open(decode_path) as f:
            lines = read_decode_file(f)
    except OSError as exc:
        raise DataError(f"cannot read decode file {decode_path}: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    chunk = cfg.decode_chunk_size()
    frame_dur = cfg.frame_duration_ms()
    sub = cfg["encoder"]["subsample"]
    pairs = []
    latency: list[LatencyRecord] = []
    for line in lines:
        utt = by_id.get(line.utt_id)
        if utt is None:
            raise DataError(f"decode file refers to unknown utterance {line.utt_id!r}")
        pairs.append((line.tokens, utt.tokens))
        eff_chunk = _effective_chunk(chunk, utt, sub)
        emission = [emission_time_ms(f, eff_chunk, frame_dur) for f in line.emit_frames]
        delays = ftd_ltd(emission, utt.token_end_ms)
        if delays is None:
            latency.append(LatencyRecord(line.utt_id, math.nan, math.nan, valid=False))
        else:
            latency.append(LatencyRecord(line.utt_id, delays[0], delays[1], valid=True))
    rescored = bool(lines) and all(line.s_final is not None for line in lines)
    cer = corpus_error_rate(pairs)
    metrics = {"cer_rescoring" if rescored else "cer_streaming": cer}
    metrics.update(latency_summary(latency))
    with open(out / "metrics.csv", "w") as f:
        write_metrics_report(f, metrics)
    with open(out / "latency.csv", "w") as f:
        write_latency_detail(f, latency)


def cmd_export_spikes(cfg: ExperimentConfig, out: Path) -> None:
    corpus = _load_corpus(cfg, cfg.path("test_corpus"))
    t_path = cfg.path("teacher_ckpt")
    s_path = cfg.path("student_ckpt")
    expected = cfg["corpus"]["vocab_size"] + 1
    for path in (t_path, s_path):
        tensors = load_checkpoint(path)
        if "head.b" not in tensors or tensors["head.b"].size != expected:
            raise DataError(f"{path}: checkpoint vocabulary does not match corpus ({expected} classes)")
    teacher = _load_model(cfg, FULL, t_path)
    student = _load_model(cfg, cfg.decode_chunk_size(), s_path)
    frame_dur = cfg.frame_duration_ms()
    t_rows, s_rows, lags = [], [], []
    for utt in corpus:
        t_spikes = extract_spikes(teacher.streaming_log_probs(utt.features))
        s_spikes = extract_spikes(student.streaming_log_probs(utt.features))
        t_rows.extend((utt.utt_id, sp) for sp in t_spikes)
        s_rows.extend((utt.utt_id, sp) for sp in s_spikes)
        lags.extend(spike_lag(s_spikes, t_spikes, frame_dur))
    with open(out / "spikes_teacher.csv", "w") as f:
        write_spike_csv(f, t_rows, frame_dur)
    with open(out / "spikes_student.csv", "w") as f:
        write_spike_csv(f, s_rows, frame_dur)
    with open(out / "lag_summary.csv", "w") as f:
        f.write("metric,value\n")
        mean = float(np.mean(lags)) if lags else math.nan
        p50 = percentile(lags, 50) if lags else math.nan
        p90 = percentile(lags, 90) if lags else math.nan
        f.write(f"mean_lag_ms,{mean!r}\n")
        f.write(f"lag_p50_ms,{p50!r}\n")
        f.write(f"lag_p90_ms,{p90!r}\n")
        f.write(f"matched_pairs,{float(len(lags))!r}\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "sweep": cmd_sweep,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "export-spikes": cmd_export_spikes,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scdk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config value (repeatable)",
        )
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, str(out / "resolved_config.ini"))
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
