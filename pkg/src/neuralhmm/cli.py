"""Command-line entry point: ``neuralhmm <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 runtime or data error.
"""

import argparse
import glob
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import __version__, features, probing, selfcheck, training
from .model import ModelConfig, ModelError, param_count
from .numerics import Rng

log = logging.getLogger("neuralhmm")

MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in fields(training.TrainConfig)}
SYNTH_KEYS = {"num_states": int, "dim": int, "stay_prob": float, "utt_len": int,
              "num_utts": int, "min_mean_dist": float}
_CASTS = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


class ValidationError(Exception):
    pass


class DataError(Exception):
    pass


def parse_kv_file(path, schema):
    """Flat ``key = value`` text with ``#`` comments; unknown keys are errors."""
    out = {}
    try:
        fh = open(path)
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = _coerce(key, value, schema, f"{path}:{lineno}")
    return out


def _coerce(key, value, schema, where):
    if key not in schema:
        raise ValidationError(f"{where}: unknown key {key!r}")
    cast = _CASTS.get(schema[key], str)
    try:
        return cast(value)
    except ValueError as e:
        raise ValidationError(f"{where}: bad value for {key!r}: {value!r}") from e


def build_configs(args):
    schema = {**MODEL_KEYS, **TRAIN_KEYS}
    merged = parse_kv_file(args.config, schema) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = _coerce(key.strip(), value.strip(), schema, "--set")
    for key in ("variant", "hop", "seed", "epochs", "num_states", "time_shift"):
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    mcfg = ModelConfig(**{k: v for k, v in merged.items() if k in MODEL_KEYS})
    tcfg = training.TrainConfig(**{k: v for k, v in merged.items() if k in TRAIN_KEYS})
    try:
        mcfg.validate()
        tcfg.validate()
    except ValueError as e:
        raise ValidationError(str(e)) from e
    return mcfg, tcfg


def write_effective_config(path, mcfg, tcfg):
    with open(path, "w") as fh:
        fh.write(f"# neuralhmm {__version__} effective configuration\n")
        for key, value in {**asdict(mcfg), **asdict(tcfg)}.items():
            fh.write(f"{key} = {value}\n")


def cmd_extract(args):
    wavs = sorted(glob.glob(os.path.join(args.wav_dir, "*.wav")))
    if not wavs:
        raise DataError(f"no input files in {args.wav_dir}")
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = features.MelConfig()
    feats, failed = [], 0
    for path in wavs:
        try:
            feats.append((path, features.log_mel(features.read_wav(path), cfg)))
        except (OSError, ValueError) as e:
            print(f"error: {e}", file=sys.stderr)
            failed += 1
    if not feats:
        raise DataError("no file could be processed")
    if args.stats_in:
        stats = features.read_norm_stats(args.stats_in)
    else:
        stats = features.compute_norm_stats([f for _, f in feats])
        features.write_norm_stats(args.stats_out or os.path.join(args.out_dir, "stats.txt"), stats)
    entries = []
    for path, f in feats:
        uid = os.path.splitext(os.path.basename(path))[0]
        out = os.path.join(args.out_dir, uid + ".lmf")
        features.write_features(out, features.normalize(f, stats))
        lab = os.path.splitext(path)[0] + ".lab"
        entries.append(features.ManifestEntry(uid, out, lab if os.path.exists(lab) else None))
    features.write_manifest(os.path.join(args.out_dir, "manifest.tsv"), entries)
    print(f"extracted {len(entries)} utterances, {failed} failed")
    return 2 if failed else 0


def cmd_synth(args):
    values = parse_kv_file(args.spec, SYNTH_KEYS) if args.spec else {}
    spec = training.SynthSpec(**values)
    try:
        spec.validate()
    except ValueError as e:
        raise ValidationError(str(e)) from e
    training.synth_generate(spec, Rng(args.seed), args.out_dir)
    print(f"wrote {spec.num_utts} utterances to {os.path.join(args.out_dir, 'manifest.tsv')}")
    return 0


def cmd_pretrain(args):
    mcfg, tcfg = build_configs(args)
    os.makedirs(args.out, exist_ok=True)
    existing = glob.glob(os.path.join(args.out, "*.nhmm"))
    if existing and not args.force:
        raise ValidationError(f"{args.out} already holds checkpoints; pass --force to overwrite")
    write_effective_config(os.path.join(args.out, "config.txt"), mcfg, tcfg)
    try:
        entries = features.read_manifest(args.manifest)
    except OSError as e:
        raise DataError(f"cannot read manifest: {e}") from e
    try:
        result = training.train(entries, mcfg, tcfg, out_dir=args.out, force=args.force,
                                log_path=os.path.join(args.out, "loss.log"))
    except (training.TrainingError, ModelError) as e:
        raise DataError(str(e)) from e
    training.save_checkpoint(os.path.join(args.out, "final.nhmm"), result.checkpoint)
    print(f"parameters {param_count(result.checkpoint.params)}")
    print(f"final mean loss {result.epoch_losses[-1]:.6f}")
    return 0


def _load_checkpoint(path):
    try:
        return training.load_checkpoint(path)
    except (OSError, training.CheckpointError) as e:
        raise DataError(str(e)) from e


def cmd_decode(args):
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    items = []
    for e in features.read_manifest(args.manifest):
        frames = features.read_features(e.feature_path).frames
        try:
            items.append((e.utt_id, probing.decode_codes(ckpt.params, frames, cfg)))
        except ModelError as err:
            raise DataError(f"{e.utt_id}: {err}") from err
    probing.write_codes(args.out, items)
    print(f"decoded {len(items)} utterances to {args.out}")
    return 0


def _reference(entry, num_codes):
    if not entry.label_path:
        raise DataError(f"{entry.utt_id}: manifest row has no label file")
    num_frames = features.read_features(entry.feature_path).num_frames
    k = num_frames - num_codes
    if k < 0:
        raise DataError(f"{entry.utt_id}: more codes than frames")
    segs = features.read_labels(entry.label_path)
    labels = features.labels_to_frames(segs, num_frames)
    if any(lab is None for lab in labels[k:]):
        raise DataError(f"{entry.utt_id}: labels do not cover frames {k}..{num_frames - 1}")
    return k, segs, labels[k:]


def cmd_eval(args):
    entries = features.read_manifest(args.manifest)
    rows = []
    if args.metric == "probe":
        if not args.checkpoint:
            raise ValidationError("--metric probe needs --checkpoint")
        ckpt = _load_checkpoint(args.checkpoint)
        reps, labels = [], []
        for e in entries:
            frames = features.read_features(e.feature_path).frames
            r = probing.representations(ckpt.params, frames, ckpt.model_config)
            _, _, lab = _reference(e, r.shape[0])
            reps.append(r)
            labels.append(np.asarray(lab))
        n_train = max(1, int(round(args.train_fraction * len(entries))))
        if n_train >= len(entries):
            raise ValidationError("probe needs at least one held-out utterance")
        probe = probing.probe_train(np.concatenate(reps[:n_train]),
                                    np.concatenate(labels[:n_train]),
                                    epochs=args.probe_epochs, seed=args.seed)
        err = probing.probe_eval(probe, np.concatenate(reps[n_train:]),
                                 np.concatenate(labels[n_train:]))
        rows = [("frame_error_rate", err)]
    else:
        codes = probing.read_codes(args.codes)
        hyp_all, ref_all, pairs = [], [], []
        for e in entries:
            if e.utt_id not in codes:
                raise DataError(f"no codes for utterance {e.utt_id}")
            c = codes[e.utt_id]
            k, segs, ref = _reference(e, len(c))
            hyp_all.append(c)
            ref_all.extend(ref)
            pairs.append((probing.boundaries_from_codes(c),
                          probing.segments_to_boundaries(segs, offset=k)))
        if args.metric == "nmi":
            rows = [("nmi", probing.nmi(np.concatenate(hyp_all), np.asarray(ref_all),
                                        norm=args.nmi_norm))]
        else:
            s = probing.seg_prf_pooled(pairs, tol_ms=args.tol_ms)
            rows = [("precision", s.precision), ("recall", s.recall), ("f1", s.f1),
                    ("hits", s.hits), ("hyp_boundaries", s.hyp_total),
                    ("ref_boundaries", s.ref_total)]
    print(probing.format_report(rows))
    if args.csv:
        probing.write_report_csv(args.csv, rows)
    return 0


def cmd_selfcheck(args):
    results = selfcheck.run_all(fault=args.inject_fault, seeds=args.seeds)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 2


def build_parser():
    p = argparse.ArgumentParser(prog="neuralhmm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"neuralhmm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", help="WAV files to normalized log Mel features")
    s.add_argument("--wav-dir", required=True)
    s.add_argument("--out-dir", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--stats-out")
    g.add_argument("--stats-in")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("synth", help="generate a synthetic Gaussian-HMM corpus")
    s.add_argument("--spec")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="train a neural HMM or VQ-APC model")
    s.add_argument("--config")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=["neural_hmm", "vq_apc"])
    s.add_argument("--hop", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--num-states", dest="num_states", type=int)
    s.add_argument("--time-shift", dest="time_shift", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("decode", help="Viterbi codes for every utterance")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="NMI, segmentation or linear-probe report")
    s.add_argument("--codes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--metric", choices=["nmi", "seg", "probe"], required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--nmi-norm", choices=["arithmetic", "max", "sqrt"], default="arithmetic")
    s.add_argument("--tol-ms", type=float, default=20.0)
    s.add_argument("--train-fraction", type=float, default=0.9)
    s.add_argument("--probe-epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selfcheck", help="run the lattice and gradient oracle suites")
    s.add_argument("--seeds", type=int, default=100)
    s.add_argument("--inject-fault", choices=["xi-sign"], help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print(f"neuralhmm {__version__}", file=sys.stderr)
    if args.command in ("eval",) and args.metric != "probe" and not args.codes:
        print("error: --codes is required for nmi and seg", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValidationError, ModelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
