"""Command-line entry point: ``ctxtransducer <command> [options]``.

Data goes to files or standard output, diagnostics to standard error. The
exit status is 0 only when the command completed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .dataset import (
    ManifestError,
    UtteranceRecord,
    SegmentRecord,
    apply_channel_bias,
    apply_reverb,
    channel_bias_vector,
    generate_context_task,
    load_impulse_response,
    read_manifest,
    relative_audio_path,
    write_manifest,
)
from .decode import DECODE_CONTEXTS, compare_systems, decode_utterance, evaluate
from .features import InvalidInputError, extract_logmel, read_wav, stack_downsample, write_wav
from .model import CheckpointError, checkpoint_info, load_checkpoint
from .saliency import export_trace, saliency_trace
from .training import NonFiniteGradientError, TrainMode, train

log = logging.getLogger("ctxtransducer")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    return load_config(args.config)


def _read(path) -> list[UtteranceRecord]:
    try:
        return read_manifest(path)
    except OSError as err:
        raise CliError(f"cannot read manifest {path}: {err.strerror}") from None


def _checkpoint(path):
    try:
        params, *_ = load_checkpoint(path)
    except OSError as err:
        raise CliError(f"cannot read checkpoint {path}: {err.strerror}") from None
    return params, checkpoint_info(path)["info"]


def _decode_context(explicit: str | None, info: dict) -> str:
    """Decode the way the model was trained unless told otherwise."""
    if explicit:
        return explicit
    mode = info.get("train_mode")
    return TrainMode.parse(mode).value if mode else "full_utterance"


def _summary(records: list[UtteranceRecord]) -> dict:
    labeled = sum(len(r.labeled_segments()) for r in records)
    prefixes = [r.labeled_segments()[0][1].t_s for r in records if r.labeled_segments()]
    return {
        "utterances": len(records),
        "labeled_segments": labeled,
        "mean_prefix_frames": float(np.mean(prefixes)) if prefixes else 0.0,
    }


# ---------------------------------------------------------------------------
# commands

def cmd_datagen(args) -> int:
    cfg = _config(args)
    n = cfg.data.n_train if args.n is None else args.n
    if n < 1:
        raise CliError("refusing to generate an empty dataset (--n must be >= 1)")
    task = cfg.task if args.seed is None else dataclasses.replace(cfg.task, rng_seed=args.seed)
    out = Path(args.out)
    splits = {"train": (task, n)}
    if cfg.data.n_dev > 0:
        splits["dev"] = (dataclasses.replace(task, rng_seed=task.rng_seed + cfg.data.eval_seed_offset // 2), cfg.data.n_dev)
    if cfg.data.n_eval > 0:
        eval_task = dataclasses.replace(task, rng_seed=task.rng_seed + cfg.data.eval_seed_offset)
        if cfg.data.eval_clean:
            eval_task = dataclasses.replace(eval_task, channel_bias_magnitude=0.0)
        splits["eval"] = (eval_task, cfg.data.n_eval)
    report = {}
    for name, (spec, count) in splits.items():
        records = generate_context_task(spec, count)
        write_manifest(records, out / name / "manifest.jsonl")
        report[name] = {"manifest": str(out / name / "manifest.jsonl"), **_summary(records)}
    (out / "config.ini").write_text(dataclasses.replace(cfg, task=task).to_ini(), encoding="utf-8")
    print(json.dumps(report, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    mode = TrainMode.parse(args.mode or cfg.train.mode)
    records = _read(args.manifest)
    dev = _read(args.dev_manifest) if args.dev_manifest else None
    if records and records[0].features.shape[1] != cfg.model.input_dim:
        raise CliError(
            f"manifest features have {records[0].features.shape[1]} dims but [model] input_dim = {cfg.model.input_dim}"
        )
    t = cfg.train
    seed = t.seed if args.seed is None else args.seed
    steps = t.total_steps if args.steps is None else args.steps
    result = train(
        records,
        cfg.model,
        mode,
        cfg.schedule,
        t.batch_size,
        steps,
        seed,
        args.out,
        dev_records=dev,
        augment=cfg.augment.policy(seed),
        n_stack=t.n_stack,
        checkpoint_every=t.checkpoint_every or None,
        keep_last=t.keep_last,
        max_grad_norm=t.max_grad_norm or None,
        resume=args.resume,
    )
    print(f"best checkpoint: {result.out_dir / 'best.sgck'} (step {result.best.step}, dev loss {result.best.dev_loss:.6f})")
    print(f"mean forward ms/batch: {result.mean_forward_ms:.3f}")
    print(f"mean backward ms/batch: {result.mean_backward_ms:.3f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    records = _read(args.manifest)
    beam = args.beam_width or cfg.eval.beam_width
    base, base_info = _checkpoint(args.base)
    new, new_info = _checkpoint(args.new)
    reports = []
    for params, info, ctx in ((base, base_info, args.base_context), (new, new_info, args.new_context)):
        reports.append(evaluate(params, records, beam, threads=args.threads, context=_decode_context(ctx, info)))
    table = compare_systems(*reports)
    print(table.to_table())
    if args.rows:
        Path(args.rows).write_text("".join(json.dumps(r) + "\n" for r in table.to_rows()), encoding="utf-8")
    return 0


def cmd_decode(args) -> int:
    cfg = _config(args)
    records = _read(args.manifest)
    params, info = _checkpoint(args.checkpoint)
    ctx = _decode_context(args.context, info)
    beam = args.beam_width or cfg.eval.beam_width
    for rec in records:
        for d in decode_utterance(params, rec, beam, context=ctx):
            print(json.dumps({"id": rec.id, "segment": d.segment_index, "tokens": list(d.labels), "log_score": d.log_score}))
    return 0


def cmd_saliency(args) -> int:
    records = {r.id: r for r in _read(args.manifest)}
    if args.utterance not in records:
        raise CliError(f"utterance {args.utterance!r} not found in {args.manifest}")
    params, _ = _checkpoint(args.checkpoint)
    u = records[args.utterance]
    try:
        trace = saliency_trace(params, u, args.segment, args.mode)
    except IndexError as err:
        raise CliError(str(err)) from None
    export_trace(trace, args.out)
    print(f"wrote {len(trace.grad_norm)} frames to {args.out}")
    return 0


def _reverb_record(r: UtteranceRecord, ir, scope: str, src: Path, dst: Path) -> UtteranceRecord:
    if r.audio is None:
        raise CliError(f"utterance {r.id!r} has no audio; use the channel-bias perturbation instead of --ir")
    w = read_wav(src.parent / r.audio)
    y = apply_reverb(w, ir, scope, r.segments)
    wav = dst.parent / "audio" / f"{Path(r.audio).stem}.{scope}.wav"
    wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(wav, y)
    feats = stack_downsample(extract_logmel(y)).frames
    if len(feats) != r.n_frames:
        raise CliError(f"utterance {r.id!r}: re-extracted {len(feats)} frames, manifest has {r.n_frames}")
    tag = "reverb_full" if scope == "full_utterance" else "reverb_segment"
    return dataclasses.replace(
        r,
        features=feats.astype(np.float32),
        audio=relative_audio_path(dst, wav),
        condition=frozenset((set(r.condition) - {"clean"}) | {tag}),
    )


def cmd_perturb(args) -> int:
    cfg = _config(args)
    src, dst = Path(args.manifest), Path(args.out)
    records = _read(src)
    if args.ir:
        ir = load_impulse_response(args.ir, args.ir_rate)
        out = [_reverb_record(r, ir, args.scope, src, dst) for r in records]
    else:
        if not records:
            raise CliError("nothing to perturb: manifest is empty")
        magnitude = cfg.eval.perturb_magnitude if args.magnitude is None else args.magnitude
        seed = cfg.eval.perturb_seed if args.seed is None else args.seed
        bias = channel_bias_vector(records[0].features.shape[1], magnitude, seed, protect_dims=cfg.task.cue_code_count)
        out = [apply_channel_bias(r, bias, args.scope) for r in records]
    write_manifest(out, dst)
    print(json.dumps({"manifest": str(dst), "scope": args.scope, **_summary(out)}))
    return 0


def cmd_ingest(args) -> int:
    """Build a manifest from a JSON-lines listing of ``{id, audio, segments}`` entries."""
    listing = Path(args.listing)
    dst = Path(args.out)
    records = []
    for lineno, line in enumerate(listing.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            wav_path = (listing.parent / e["audio"]).resolve()
            segs = [SegmentRecord(int(a), int(b), None if y is None else tuple(int(v) for v in y)) for a, b, y in e["segments"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise CliError(f"{listing}:{lineno}: malformed entry: {err}") from None
        feats = stack_downsample(extract_logmel(read_wav(wav_path))).frames.astype(np.float32)
        records.append(
            UtteranceRecord(e["id"], feats, segs, frozenset(e.get("condition", ["clean"])), audio=relative_audio_path(dst, wav_path))
        )
    write_manifest(records, dst)
    print(json.dumps({"manifest": str(dst), **_summary(records)}))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctxtransducer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration (default: $CTXT_CONFIG, else built-in defaults)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="decoding worker threads")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="generate the synthetic context-cue task")
    s.add_argument("--out", required=True, help="output directory (train/, dev/, eval/ manifests)")
    s.add_argument("--n", type=int, help="number of training utterances")
    s.add_argument("--seed", type=int, help="task seed")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", parents=[common], help="train one model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--dev-manifest")
    s.add_argument("--mode", choices=[m.value for m in TrainMode] + ["full", "segm"])
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="compare two checkpoints per condition")
    s.add_argument("--base", required=True, help="baseline checkpoint")
    s.add_argument("--new", required=True, help="checkpoint to compare")
    s.add_argument("--manifest", required=True)
    s.add_argument("--beam-width", type=int)
    s.add_argument("--base-context", choices=DECODE_CONTEXTS, help="default: the checkpoint's training mode")
    s.add_argument("--new-context", choices=DECODE_CONTEXTS, help="default: the checkpoint's training mode")
    s.add_argument("--rows", help="also write machine-readable JSON-lines rows here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", parents=[common], help="decode labeled segments, one JSON line each")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--beam-width", type=int)
    s.add_argument("--context", choices=DECODE_CONTEXTS)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("saliency", parents=[common], help="export per-frame input-gradient norms")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--utterance", required=True)
    s.add_argument("--segment", type=int, required=True)
    s.add_argument("--mode", default="full_utterance", choices=[m.value for m in TrainMode])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("perturb", parents=[common], help="reverb (audio) or channel-bias (features) perturbation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scope", required=True, choices=["full_utterance", "segments_only"])
    s.add_argument("--out", required=True, help="output manifest path")
    s.add_argument("--ir", help="impulse response (WAV, or text with --ir-rate); requires audio-bearing records")
    s.add_argument("--ir-rate", type=int)
    s.add_argument("--magnitude", type=float, help="channel-bias norm")
    s.add_argument("--seed", type=int, help="channel-bias direction seed")
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("ingest", parents=[common], help="extract features for WAV files listed in JSON lines")
    s.add_argument("--listing", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (CliError, ConfigError, ManifestError, CheckpointError, InvalidInputError, NonFiniteGradientError, ValueError) as err:
        print(f"ctxtransducer {args.command}: error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"ctxtransducer {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
