"""Command-line front end.

Machine-readable results (one JSON object) go to stdout; logs and
diagnostics go to stderr. Exit codes: 0 success, 1 usage/config/internal
error, 2 bad input data, 3 unusable checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import checkpoint as ckpt_io
from .acoustic import AcousticModel, pretrain
from .asr import AsrModel, finetune
from .audio_io import load_for_model
from .config import PipelineConfig, dump_defaults
from .corpus import TemplateSet, emit_manifest, gen_text_corpus, load_manifest
from .errors import (CheckpointError, ConfigError, DataError, EmptyManifest, InputTooShort,
                     InsufficientMaskedFrames, SequenceTooLong, TargetTooLong, Wav2EntError)
from .ner.model import NerModel, mlm_pretrain, train_ner
from .ner.tokenizer import TokenVocab
from .persist import acoustic_checkpoint, asr_checkpoint, load_acoustic, load_asr, load_ner, ner_checkpoint
from .pipeline import (EVAL_FIELDS, aggregate, audio_path, extract_many, load_labeled, read_bytes,
                       score_utterance)

EXIT_OK, EXIT_FAILURE, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3
# model-level errors that can only come from what is in the input files
_DATA_LIKE = (DataError, TargetTooLong, InputTooShort, SequenceTooLong, InsufficientMaskedFrames)
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("wav2ent")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FAILURE, f"{self.prog}: error: {message}\n")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _setup_logging() -> None:
    level = LOG_LEVELS.get(os.environ.get("W2E_LOG", "info").lower(), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False


def _steps(args, section: dict) -> int:
    steps = section["steps"] if args.steps is None else args.steps
    if steps < 0:
        raise ConfigError("--steps must be non-negative")
    return steps


def _log_final(history, log_every: int) -> float | None:
    if not history:
        return None
    last = history[-1]
    step, loss = (last["step"], last["loss"]) if isinstance(last, dict) else (len(history), last)
    if not log_every or step % log_every:
        log.info("step=%d loss=%.6f", step, loss)
    return float(loss)


def _write_history(path, history) -> None:
    if path is None:
        return
    rows = [h if isinstance(h, dict) else {"step": i, "loss": h} for i, h in enumerate(history, 1)]
    fields = list(rows[0]) if rows else ["step", "loss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)


def _save(path, ckpt, history) -> dict:
    try:
        ckpt_io.save(path, ckpt)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    final = history[-1] if history else None
    loss = final["loss"] if isinstance(final, dict) else final
    return {"checkpoint": str(path), "kind": ckpt.kind, "steps": len(history),
            "final_loss": loss, "crc32": f"{ckpt_io.crc_of(path):08x}"}


def _manifest(path):
    utts = load_manifest(path)
    if not utts:
        raise EmptyManifest(f"{path} lists no utterances")
    return utts


def _waves(manifest, utts):
    return [load_for_model(read_bytes(audio_path(manifest, u))).samples for u in utts]


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_corpus(args, cfg: PipelineConfig) -> dict:
    c = cfg["corpus"]
    n = c["n"] if args.n is None else args.n
    if n < 0:
        raise ConfigError("-n must be non-negative")
    out = args.out or cfg["paths"]["corpus_dir"]
    utts = gen_text_corpus(TemplateSet.default(), n, args.seed)
    path = emit_manifest(utts, out, sigma=c["sigma"], seed=args.seed, rate=c["sample_rate"])
    return {"manifest": str(path), "n_utterances": n}


def cmd_pretrain_asr(args, cfg: PipelineConfig) -> dict:
    utts = _manifest(args.manifest)
    sec = cfg["pretrain"]
    model = AcousticModel(cfg.encoder, args.seed)
    res = pretrain(_waves(args.manifest, utts), cfg.encoder, _steps(args, sec), args.seed,
                   batch_size=sec["batch_size"], lr=sec["lr"], log_every=sec["log_every"], model=model,
                   max_samples=sec["max_samples"])
    _log_final(res.history, sec["log_every"])
    _write_history(args.history, res.history)
    return _save(args.out or cfg["paths"]["acoustic_checkpoint"], acoustic_checkpoint(res.model), res.history)


def cmd_finetune_asr(args, cfg: PipelineConfig) -> dict:
    init = ckpt_io.load(args.init or cfg["paths"]["acoustic_checkpoint"])
    if init.kind == "acoustic+ctc":
        model = load_asr(init)
        acoustic = model.acoustic
    else:
        acoustic = load_acoustic(init)
        model = AsrModel(acoustic, args.seed)
    utts = _manifest(args.manifest)
    sec = cfg["finetune"]
    res = finetune(acoustic, _waves(args.manifest, utts), [u.text for u in utts], _steps(args, sec),
                   args.seed, batch_size=sec["batch_size"], lr=sec["lr"], log_every=sec["log_every"],
                   model=model)
    _log_final(res.history, sec["log_every"])
    _write_history(args.history, res.history)
    return _save(args.out or cfg["paths"]["asr_checkpoint"], asr_checkpoint(res.model), res.history)


def cmd_pretrain_ner(args, cfg: PipelineConfig) -> dict:
    corpus = [tokens for tokens, _ in load_labeled(args.manifest)]
    sec = cfg["ner_pretrain"]
    model = NerModel(TokenVocab.build(corpus), cfg.ner, seed=args.seed)
    history = mlm_pretrain(corpus, model, _steps(args, sec), args.seed, batch_size=sec["batch_size"],
                           lr=sec["lr"], log_every=sec["log_every"])
    _log_final(history, sec["log_every"])
    _write_history(args.history, history)
    return _save(args.out or cfg["paths"]["ner_checkpoint"], ner_checkpoint(model), history)


def cmd_train_ner(args, cfg: PipelineConfig) -> dict:
    corpus = load_labeled(args.manifest)
    if args.init:
        model = load_ner(ckpt_io.load(args.init))
    else:
        model = NerModel(TokenVocab.build(t for t, _ in corpus), cfg.ner, seed=args.seed)
    sec = cfg["ner_train"]
    history = train_ner(model, corpus, _steps(args, sec), args.seed, batch_size=sec["batch_size"],
                        lr=sec["lr"], unk_rate=sec["unk_rate"], log_every=sec["log_every"])
    _log_final(history, sec["log_every"])
    _write_history(args.history, history)
    return _save(args.out or cfg["paths"]["ner_checkpoint"], ner_checkpoint(model), history)


def _beam(args, cfg) -> int:
    beam = cfg["decode"]["beam"] if args.beam is None else args.beam
    if beam < 1:
        raise ConfigError("--beam must be at least 1")
    return beam


def _checkpoint_paths(args, cfg):
    asr = args.asr or cfg["paths"]["asr_checkpoint"]
    ner = args.ner or cfg["paths"]["ner_checkpoint"]
    return asr, ner


def cmd_run(args, cfg: PipelineConfig) -> dict:
    asr, ner = _checkpoint_paths(args, cfg)
    return extract_many([args.audio], asr, ner, _beam(args, cfg))[0]


def cmd_eval(args, cfg: PipelineConfig) -> dict:
    utts = _manifest(args.manifest)
    asr, ner = _checkpoint_paths(args, cfg)
    paths = [audio_path(args.manifest, u) for u in utts]
    results = extract_many(paths, asr, ner, _beam(args, cfg), jobs=args.jobs)
    rows = [score_utterance(u, r) for u, r in zip(utts, results)]
    if args.per_utt:
        with open(args.per_utt, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    return aggregate(rows)


def cmd_config(args, cfg: PipelineConfig):
    return json.loads(dump_defaults() if args.dump_defaults else cfg.to_json())


# -- argument parsing --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--steps", type=int, help="overrides the stage's step budget")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for inference")
    common.add_argument("--beam", type=int, help="beam width; 1 is greedy decoding")

    p = _Parser(prog="wav2ent", description="Speech to named entities, trained from scratch.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", parents=[common], help="synthesize a labeled speech corpus")
    g.add_argument("out", nargs="?", help="output directory (its parent must exist)")
    g.add_argument("-n", type=int, help="number of utterances")
    g.set_defaults(func=cmd_gen_corpus)

    for name, func, help_ in (
        ("pretrain-asr", cmd_pretrain_asr, "self-supervised acoustic pretraining"),
        ("finetune-asr", cmd_finetune_asr, "CTC fine-tuning of a pretrained encoder"),
        ("pretrain-ner", cmd_pretrain_ner, "masked-language-model pretraining of the tagger"),
        ("train-ner", cmd_train_ner, "CRF training of the tagger"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("manifest")
        s.add_argument("--out", help="checkpoint to write")
        s.add_argument("--history", help="write the loss history as CSV")
        if name in ("finetune-asr", "train-ner"):
            s.add_argument("--init", help="checkpoint to start from")
        s.set_defaults(func=func)

    r = sub.add_parser("run", parents=[common], help="extract entities from one WAV file")
    r.add_argument("audio")
    r.add_argument("--asr", help="acoustic+ctc checkpoint")
    r.add_argument("--ner", help="ner checkpoint")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="WER, CER and entity scores over a manifest")
    e.add_argument("manifest")
    e.add_argument("--asr")
    e.add_argument("--ner")
    e.add_argument("--per-utt", help="write per-utterance counts as CSV")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("config", parents=[common], help="print the effective configuration")
    c.add_argument("--dump-defaults", action="store_true", help="print the built-in defaults")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as stop:  # usage errors and --help
        return stop.code if isinstance(stop.code, int) else EXIT_FAILURE
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is None:
            args.seed = cfg["seed"]
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        _emit(args.func(args, cfg))
        return EXIT_OK
    except CheckpointError as exc:
        log.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    except _DATA_LIKE as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigError, Wav2EntError) as exc:
        log.error("error: %s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
