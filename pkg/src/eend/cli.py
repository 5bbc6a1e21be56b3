"""Command-line entry point: ``eend <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 training
divergence, 5 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("eend")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _set_threads(argv: list[str]):
    """Cap BLAS threads; must run before numpy is first imported."""
    threads = os.environ.get("EEND_THREADS")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads and threads.isdigit() and int(threads) > 0:
        for var in _THREAD_VARS:
            os.environ[var] = threads


# ---------------------------------------------------------------- helpers


def _run_config(args):
    from eend.config import load_config

    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.config is not None and not Path(args.config).is_file():
        raise CliError(f"config file not found: {args.config}", EXIT_IO)
    return load_config(args.config, args.preset, overrides)


def _explicit_values(args) -> dict:
    """Config keys the user actually supplied (preset, file or --set)."""
    from eend.config import REGISTRY, parse_text, parse_value, preset_text

    values = {}
    if args.preset:
        values.update(parse_text(preset_text(args.preset)))
    if args.config:
        values.update(parse_text(Path(args.config).read_text(), args.config))
    for item in args.set or []:
        k, v = (t.strip() for t in item.split("=", 1))
        values[k] = parse_value(REGISTRY[k], v)
    return values


def _load_recordings(manifest, num_speakers):
    from eend.datagen import load_recordings

    if not Path(manifest).is_file():
        raise CliError(f"manifest not found: {manifest}", EXIT_IO)
    return load_recordings(manifest, num_speakers)


def _load_checkpoint(path):
    from eend.model import load_checkpoint

    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    return load_checkpoint(path)


def _check_model_match(args, ckpt_config):
    have = ckpt_config.to_dict()
    diff = []
    for key, value in _explicit_values(args).items():
        section, name = key.split(".", 1)
        if section != "model":
            continue
        if name == "tap_layers":
            value = list(value) if value is not None else None
        if have[name] != value:
            diff.append(f"{name} (checkpoint {have[name]!r}, requested {value!r})")
    if diff:
        raise CliError("model config differs from checkpoint: " + "; ".join(diff), EXIT_CHECKPOINT)


def _epoch_checkpoints(out_dir: Path) -> list[Path]:
    found = [(int(m.group(1)), p) for p in out_dir.glob("epoch_*.ckpt")
             if (m := re.fullmatch(r"epoch_(\d+)\.ckpt", p.name))]
    return [p for _, p in sorted(found)]


def _write_average(out_dir: Path, k: int):
    from eend.model import build_params, save_checkpoint
    from eend.trainer import average_checkpoints

    paths = _epoch_checkpoints(out_dir)[-k:]
    if not paths:
        log.warning("no epoch checkpoints written; skipping averaged.ckpt")
        return None
    config, state = average_checkpoints(paths)
    params = build_params(config)
    params.load_state_dict(state)
    target = out_dir / "averaged.ckpt"
    save_checkpoint(target, config, params)
    return target


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    import dataclasses

    import numpy as np

    from eend.datagen import (ManifestEntry, overlap_ratio, rttm_write, simulate_conversation,
                              write_features, write_manifest)

    run = _run_config(args)
    n = run.num_conversations if args.n is None else args.n
    base_seed = run.sim.seed if args.seed is None else args.seed
    if n < 0:
        raise CliError("--n must be non-negative", EXIT_CONFIG)
    out = Path(args.out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    (out / "rttm").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(base_seed).generate_state(max(n, 1), dtype=np.uint32)[:n]
    entries, anns = [], []
    for i, s in enumerate(seeds):
        cfg = dataclasses.replace(run.sim, seed=int(s))
        rec_id = f"sim{base_seed}_{i:05d}"
        ann, feats = simulate_conversation(cfg, rec_id)
        feat_path, rttm_path = out / "feats" / f"{rec_id}.feat", out / "rttm" / f"{rec_id}.rttm"
        write_features(feat_path, feats.data)
        rttm_write(ann, rttm_path)
        entries.append(ManifestEntry(rec_id, feat_path, rttm_path))
        anns.append(ann)
    write_manifest(out / "manifest.tsv", entries)
    rttm_write(anns, out / "all.rttm")
    (out / "run.conf").write_text(run.to_text())
    total = sum(a.end() for a in anns)
    ratio = overlap_ratio(anns) if anns else 0.0
    print(f"conversations: {n}")
    print(f"total duration: {total:.1f} s (mean {total / n if n else 0.0:.1f} s)")
    print(f"overlap ratio: {100 * ratio:.2f}% (target {100 * run.sim.overlap_ratio_target:.2f}%)")
    print(f"manifest: {out / 'manifest.tsv'}")
    return EXIT_OK


def _train_common(args, adapt: bool) -> int:
    from eend.trainer import Trainer

    run = _run_config(args)
    recordings = _load_recordings(args.manifest, run.model.num_speakers)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError(f"resume state not found: {args.resume}", EXIT_IO)
        trainer = Trainer.load_state(args.resume, run.train)
        _check_model_match(args, trainer.config)
    elif adapt:
        config, params = _load_checkpoint(args.init)
        _check_model_match(args, config)
        trainer = Trainer(config, run.train, params.astype(config.dtype))
    else:
        trainer = Trainer(run.model, run.train)
    for rec in recordings:
        if rec.features.shape[0] != trainer.config.input_dim:
            raise CliError(f"{rec.recording_id}: feature dim {rec.features.shape[0]} but model "
                           f"expects {trainer.config.input_dim}", EXIT_CHECKPOINT)
    (out / "run.conf").write_text(run.to_text())
    trainer.run(recordings, out, adapt=adapt, log_path=out / "train.log.jsonl")
    avg = _write_average(out, run.train.average_last_k)
    last = trainer.history[-1] if trainer.history else None
    if last:
        print(f"steps: {last['step']}  final loss: {last['loss']:.4f}")
    if avg is not None:
        print(f"averaged checkpoint: {avg}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_common(args, adapt=False)


def cmd_adapt(args) -> int:
    return _train_common(args, adapt=True)


def cmd_infer(args) -> int:
    from eend.datagen import read_features, read_manifest, rttm_write
    from eend.metrics import decode_posteriors, infer_recording

    run = _run_config(args)
    config, params = _load_checkpoint(args.checkpoint)
    _check_model_match(args, config)
    if not Path(args.manifest).is_file():
        raise CliError(f"manifest not found: {args.manifest}", EXIT_IO)
    if args.per_layer and not config.taps:
        raise CliError("--per-layer needs a checkpoint trained with intermediate labels",
                       EXIT_CHECKPOINT)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dec = run.decode
    layer_names = [f"layer_{l}" for l in config.taps] + [f"layer_{config.num_layers}"]
    for entry in read_manifest(args.manifest):
        feats = read_features(entry.feature_path)
        if feats.shape[0] != config.input_dim:
            raise CliError(f"{entry.recording_id}: feature dim {feats.shape[0]} but checkpoint "
                           f"expects {config.input_dim}", EXIT_CHECKPOINT)
        posteriors = infer_recording(config, params, feats)
        speakers = [f"{entry.recording_id}_spk{c}" for c in range(config.num_speakers)]

        def decode(y):
            return decode_posteriors(y, dec.threshold, dec.median_frames, entry.recording_id,
                                     speakers)

        rttm_write(decode(posteriors[-1]), out / f"{entry.recording_id}.rttm")
        if args.per_layer:
            for name, y in zip(layer_names, posteriors):
                (out / name).mkdir(exist_ok=True)
                rttm_write(decode(y), out / name / f"{entry.recording_id}.rttm")
    print(f"hypotheses written to {out}")
    return EXIT_OK


def _read_rttm_set(path):
    from eend.datagen import rttm_read

    p = Path(path)
    if not p.exists():
        raise CliError(f"RTTM path not found: {p}", EXIT_IO)
    files = sorted(p.glob("*.rttm")) if p.is_dir() else [p]
    anns = {}
    for f in files:
        for a in rttm_read(f):
            if a.recording_id in anns:
                anns[a.recording_id].entries.extend(a.entries)
            else:
                anns[a.recording_id] = a
    return anns


def cmd_score(args) -> int:
    from eend.datagen import SegmentAnnotation
    from eend.metrics import aggregate, der, der_frames, format_table, report_record

    if args.collar < 0:
        raise CliError("--collar must be non-negative", EXIT_CONFIG)
    refs, hyps = _read_rttm_set(args.ref), _read_rttm_set(args.hyp)
    reports, oracle = [], []
    records = []
    for rec_id in sorted(refs):
        ref = refs[rec_id]
        hyp = hyps.get(rec_id, SegmentAnnotation(rec_id))
        r = der(ref, hyp, args.collar)
        reports.append(r)
        records.append(report_record(rec_id, r))
        if args.oracle:
            oracle.append(der_frames(ref, hyp, args.collar))
    extra = sorted(set(hyps) - set(refs))
    if extra:
        log.warning("hypothesis recordings without reference ignored: %s", ", ".join(extra))
    total = aggregate(reports)
    records.append(report_record("TOTAL", total))
    print(format_table([(args.name or Path(args.hyp).name, total)]))
    if args.oracle:
        o = aggregate(oracle)
        print(f"frame oracle DER: {100 * o.der:.2f}%  delta: {100 * abs(o.der - total.der):.4f}%")
    if args.records:
        Path(args.records).write_text("\n".join(records) + "\n")
    return EXIT_OK


def cmd_params(args) -> int:
    from eend.model import build_params, param_count

    run = _run_config(args)
    count = param_count(run.model)
    print(f"{count:,}")
    if args.verify:
        store = build_params(run.model).num_scalars()
        print(f"instantiated: {store:,} ({'match' if store == count else 'MISMATCH'})")
        if store != count:
            return EXIT_CONFIG
    return EXIT_OK


def cmd_bench(args) -> int:
    import dataclasses

    from eend import kernels
    from eend.trainer import bench_throughput

    run = _run_config(args)
    if args.steps < 1 or args.warmup < 0 or args.frames < 1:
        raise CliError("--steps and --frames must be positive", EXIT_CONFIG)
    base = dataclasses.replace(run.model, self_cond=False, tap_layers=None)
    variants = [
        ("NA+InterLoss", dataclasses.replace(base, variant="NA", inter_loss=True)),
        ("EDA+InterLoss", dataclasses.replace(base, variant="EDA", inter_loss=True)),
        ("EDA", dataclasses.replace(base, variant="EDA", inter_loss=False)),
    ]
    batch = args.batch or run.train.batch_size
    print(f"L={base.num_layers} D={base.model_dim} batch={batch} frames={args.frames} "
          f"dtype={base.dtype} lstm={kernels.BACKEND}")
    rates = {}
    for name, cfg in variants:
        rates[name] = bench_throughput(cfg, args.steps, batch, args.frames, args.warmup)
        print(f"{name:<14} {rates[name]:8.3f} batches/s")
    names = list(rates)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            print(f"{a} / {b}: {rates[a] / rates[b]:.3f}")
    if args.records:
        Path(args.records).write_text(json.dumps({"batches_per_sec": rates}) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    from eend.config import describe_keys

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--preset", help="built-in preset (toy, paper) applied before --config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="cap BLAS threads (also EEND_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="eend", description="End-to-end neural diarization toolkit.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys:\n" + describe_keys())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write simulated conversations")
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, help="number of conversations (sim.num_conversations)")
    p.add_argument("--seed", type=int, help="base seed (sim.seed)")
    p.set_defaults(func=cmd_simulate)

    for name, func in (("train", cmd_train), ("adapt", cmd_adapt)):
        p = sub.add_parser(name, parents=[common], help=f"{name} a model on a manifest")
        p.add_argument("manifest")
        p.add_argument("out_dir")
        p.add_argument("--resume", help="train_state.npz to continue from")
        if name == "adapt":
            p.add_argument("--init", required=True, help="checkpoint to adapt")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", parents=[common], help="write hypothesis RTTMs")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--per-layer", action="store_true", help="also decode every intermediate tap")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", parents=[common], help="DER of hypothesis against reference")
    p.add_argument("ref", help="reference RTTM file or directory")
    p.add_argument("hyp", help="hypothesis RTTM file or directory")
    p.add_argument("--collar", type=float, default=0.25)
    p.add_argument("--oracle", action="store_true", help="cross-check with the frame-level scorer")
    p.add_argument("--records", help="write JSON lines per recording to this file")
    p.add_argument("--name", help="row label in the table")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("params", parents=[common], help="print the parameter count")
    p.add_argument("--verify", action="store_true", help="compare with an instantiated model")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", parents=[common], help="training throughput per variant")
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--batch", type=int, help="batch size (default train.batch_size)")
    p.add_argument("--records", help="write a JSON record to this file")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_threads(argv)

    from eend.datagen import RttmError, SimulationError
    from eend.model import CheckpointError, ConfigError
    from eend.trainer import DivergenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SimulationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, RttmError, ValueError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
