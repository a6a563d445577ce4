"""Command-line interface: prepare, train, eval, inspect-graph, verify.

Every command takes --out, honors --seed, and writes a RunManifest (JSON with
every config value materialized) into the output directory before any compute,
so a finished run can be replayed bit-identically with --from-manifest.

Exit codes: 0 success, 1 user/config error, 2 internal invariant violation.
Set IGFORMER_LOG=debug|info|warning to control log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import traceback
from pathlib import Path

import numpy as np

from . import attention, config as cfgmod, graphs as gmod, model as mmod
from . import skeleton as skel, training as tr, verify as vmod
from .errors import ConfigError, ParseError

log = logging.getLogger("igformer")

FORMATS = ("ntu", "sbu", "synth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="igformer",
                     description="skeleton-based two-person interaction recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="INI config file (defaults reproduce the reference setup)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--from-manifest", dest="from_manifest",
                       help="replay config/seed/inputs from a previous run's manifest")

    p = sub.add_parser("prepare", help="convert raw inputs to canonical samples + graph sidecars")
    common(p)
    p.add_argument("--format", required=True, choices=FORMATS)
    p.add_argument("--input", help="input directory (ntu/sbu)")
    p.add_argument("--count", type=int, default=40, help="synthetic sample count")
    p.add_argument("--classes", type=int, default=4, help="synthetic class count (1..4)")
    p.add_argument("--frames", type=int, default=64, help="synthetic clip length")
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--gen-noise", type=float, default=0.01,
                   help="generator jitter std in meters")
    p.add_argument("--k", type=int, help="override neighbor count for sidecars")

    p = sub.add_parser("train", help="train a model on prepared data")
    common(p)
    p.add_argument("--data", required=True, help="directory of prepared samples")
    p.add_argument("--val", help="directory of prepared validation samples")
    p.add_argument("--mode", choices=attention.MODES, help="override model mode")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                   help="train-time joint noise std in meters")
    p.add_argument("--k", type=int, help="override neighbor count")
    p.add_argument("--itb-layers", dest="itb_layers", type=int,
                   help="override interaction block depth")

    p = sub.add_parser("eval", help="evaluate a checkpoint on prepared data")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0,
                   help="eval-time joint noise std in meters")

    p = sub.add_parser("inspect-graph", help="dump A, DSIG, per-head SDIG and fused R as text")
    common(p)
    p.add_argument("--sample", required=True, help="canonical sample file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--itb", type=int, default=0, help="interaction block to inspect")
    p.add_argument("--k", type=int, help="override neighbor count")

    p = sub.add_parser("verify", help="run the gradient/oracle/invariant battery")
    common(p)
    p.add_argument("--corrupt-op", dest="corrupt_op",
                   help="negative control: corrupt one op's backward pass")
    return parser


def _load_manifest_overrides(args):
    if not args.from_manifest:
        return args
    with open(args.from_manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    text = "\n".join(f"[{section}]\n" + "\n".join(f"{k} = {v}" for k, v in kv.items())
                     for section, kv in manifest["config"].items())
    args._manifest_config = cfgmod.parse_config(text, path=args.from_manifest)
    if args.seed is None:
        args.seed = manifest.get("seed")
    for key, value in manifest.get("args", {}).items():
        if getattr(args, key, None) in (None, False):
            setattr(args, key, value)
    return args


def _resolve_config(args):
    if getattr(args, "_manifest_config", None) is not None:
        cfg = args._manifest_config
    elif args.config:
        cfg = cfgmod.load_config(args.config)
    else:
        cfg = cfgmod.default_config()
    # flag overrides, kept in the manifest so replays see the same values
    if getattr(args, "k", None) is not None:
        cfg.dsig.k = args.k
    if getattr(args, "mode", None) is not None:
        cfg.model.mode = args.mode
    if getattr(args, "itb_layers", None) is not None:
        cfg.model.N = args.itb_layers
    if getattr(args, "noise_sigma", None) is not None and args.command == "train":
        cfg.train.noise_sigma_m = args.noise_sigma
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _write_manifest(args, cfg, inputs):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recorded = {}
    for key in ("format", "input", "data", "val", "checkpoint", "sample", "count",
                "classes", "frames", "amplitude", "gen_noise", "mode", "itb_layers",
                "noise_sigma", "k", "itb", "corrupt_op"):
        value = getattr(args, key, None)
        if value is not None:
            recorded[key] = value
    manifest = {
        "tool_version": cfgmod.TOOL_VERSION,
        "command": args.command,
        "seed": cfg.train.seed,
        "inputs": [str(p) for p in inputs],
        "out_dir": str(out),
        "args": recorded,
        "config": cfgmod.to_sections(cfg),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "config.ini", "w", encoding="utf-8") as fh:
        fh.write(cfgmod.config_text(cfg))
    return out


def _infer_label(path, fmt):
    if fmt == "ntu":
        m = re.search(r"A(\d{3})", path.stem)
        if m:
            return int(m.group(1)) - 1
    if fmt == "sbu":
        for part in reversed(path.parent.parts):
            if re.fullmatch(r"0[1-8]", part):
                return int(part) - 1
    return 0


def _part_map_for(j):
    return skel.builtin_part_map(j)


def _write_sample(out, stem, sample, cfg):
    padded = skel.pad_sample(sample, cfg.spm.T)
    part_map = _part_map_for(padded.person_a.J)
    graphs = gmod.build_interaction_graphs(padded, part_map, cfg.spm, cfg.dsig.k)
    (out / f"{stem}.igf").write_bytes(skel.write_canonical(sample))
    (out / f"{stem}.igfd").write_bytes(gmod.write_sidecar(graphs))


def cmd_prepare(args):
    cfg = _resolve_config(args)
    if args.format in ("ntu", "sbu") and not args.input:
        raise ConfigError(f"--input is required for --format {args.format}")
    inputs = [args.input] if args.input else []
    out = _write_manifest(args, cfg, inputs)
    written = 0
    failures = 0
    if args.format == "synth":
        if not 1 <= args.classes <= len(tr.SYNTH_CLASSES):
            raise ConfigError(f"--classes must be in 1..{len(tr.SYNTH_CLASSES)}")
        samples = tr.make_synth_dataset(args.count, classes=args.classes,
                                        T=args.frames, amplitude=args.amplitude,
                                        noise=args.gen_noise, seed=cfg.train.seed)
        for i, sample in enumerate(samples):
            _write_sample(out, f"sample_{i:05d}", sample, cfg)
            written += 1
    else:
        pattern = "*.skeleton" if args.format == "ntu" else "*.txt"
        files = sorted(Path(args.input).rglob(pattern))
        if not files:
            raise ConfigError(f"no {pattern} files under {args.input}")
        for path in files:
            try:
                if args.format == "ntu":
                    bodies, _ = skel.parse_ntu(path.read_bytes())
                    sample = skel.ntu_to_sample(bodies, label=_infer_label(path, "ntu"),
                                                source_id=path.stem)
                else:
                    sample = skel.parse_sbu(path.read_bytes(),
                                            label=_infer_label(path, "sbu"),
                                            source_id=path.stem)
                _write_sample(out, path.stem, sample, cfg)
                written += 1
            except (ParseError, ConfigError, OSError) as exc:
                failures += 1
                log.warning("skipping %s: %s", path, exc)
    print(f"prepared {written} samples, {failures} failures -> {out}")
    if written == 0:
        raise ConfigError("every input failed to parse")
    return 0


def _load_prepared(data_dir, cfg):
    files = sorted(Path(data_dir).glob("*.igf"))
    if not files:
        raise ConfigError(f"no prepared samples (*.igf) in {data_dir}")
    prepared = []
    part_map = None
    for path in files:
        sample = skel.read_canonical(path.read_bytes())
        padded = skel.pad_sample(sample, cfg.spm.T)
        if part_map is None:
            part_map = _part_map_for(padded.person_a.J)
        graphs = None
        sidecar = path.with_suffix(".igfd")
        if sidecar.exists():
            m, k, ab, ba = gmod.read_sidecar(sidecar.read_bytes())
            if m == cfg.spm.M(part_map.B) and k == cfg.dsig.k:
                graphs = gmod.InteractionGraphs(None, None, ab, ba, k)
        if graphs is None:
            graphs = gmod.build_interaction_graphs(padded, part_map, cfg.spm, cfg.dsig.k)
        prepared.append(tr.PreparedSample(padded, graphs))
    labels = sorted({p.label for p in prepared})
    if labels and labels[-1] >= cfg.model.num_classes:
        raise ConfigError(f"label {labels[-1]} needs num_classes > {labels[-1]}, "
                          f"config says {cfg.model.num_classes}")
    return prepared, part_map


def cmd_train(args):
    cfg = _resolve_config(args)
    prepared, part_map = _load_prepared(args.data, cfg)
    val_set = None
    if args.val:
        val_set, _ = _load_prepared(args.val, cfg)
    out = _write_manifest(args, cfg, [args.data] + ([args.val] if args.val else []))
    model = mmod.init_params(cfg.model, seed=cfg.train.seed, part_map=part_map)
    log_path = out / "metrics.log"
    with open(log_path, "w", encoding="utf-8") as fh:
        def emit(line):
            fh.write(line + "\n")
            fh.flush()
            log.info("%s", line)
        result = tr.train(model, prepared, cfg.train, val_set=val_set, log_fn=emit)
    digest = cfgmod.architecture_digest(cfg)
    (out / "checkpoint.igfc").write_bytes(mmod.save_checkpoint(model, digest))
    final = result.metrics[-1]
    print(f"trained {cfg.train.epochs} epochs ({result.steps} steps); "
          f"final train acc {final[3]:.3f}, val acc {final[4]:.3f} -> {out}")
    return 0


def _load_model(checkpoint_path, cfg, part_map):
    digest, params = mmod.load_checkpoint(Path(checkpoint_path).read_bytes())
    want = cfgmod.architecture_digest(cfg)
    if digest != want:
        raise ConfigError(f"checkpoint digest {digest} does not match the "
                          f"config's architecture digest {want}")
    model = mmod.init_params(cfg.model, seed=0, part_map=part_map)
    mmod.apply_checkpoint(model, params)
    return model


def cmd_eval(args):
    cfg = _resolve_config(args)
    prepared, part_map = _load_prepared(args.data, cfg)
    out = _write_manifest(args, cfg, [args.data, args.checkpoint])
    model = _load_model(args.checkpoint, cfg, part_map)
    report = tr.evaluate(model, prepared, noise_sigma_m=args.noise_sigma or 0.0,
                         noise_seed=cfg.train.seed)
    class_names = tr.SYNTH_CLASSES if cfg.model.num_classes <= len(tr.SYNTH_CLASSES) else None
    text = report.text(class_names=class_names)
    (out / "eval.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_inspect_graph(args):
    cfg = _resolve_config(args)
    sample = skel.read_canonical(Path(args.sample).read_bytes())
    padded = skel.pad_sample(sample, cfg.spm.T)
    part_map = _part_map_for(padded.person_a.J)
    out = _write_manifest(args, cfg, [args.sample, args.checkpoint])
    model = _load_model(args.checkpoint, cfg, part_map)
    graphs = gmod.build_interaction_graphs(padded, part_map, cfg.spm, cfg.dsig.k)
    if not 0 <= args.itb < cfg.model.N:
        raise ConfigError(f"--itb must be in 0..{cfg.model.N - 1}")
    collect = {}
    model.forward(padded, graphs, collect=collect)
    block = collect[f"itb{args.itb}"]

    def dump(name, matrix):
        (out / f"{name}.txt").write_text(attention.matrix_to_text(matrix), encoding="utf-8")

    dump("A_ab", graphs.A_ab)
    dump("A_ba", graphs.A_ba)
    dump("DSIG_ab", graphs.dsig_ab)
    dump("DSIG_ba", graphs.dsig_ba)
    rowsum_lines = []
    for tag in ("ab", "ba"):
        for head, matrix in enumerate(block.get(f"sdig_{tag}", [])):
            dump(f"SDIG_{tag}_head{head}", matrix)
        for head, matrix in enumerate(block.get(f"r_{tag}", [])):
            dump(f"R_{tag}_head{head}", matrix)
            dev = np.abs(matrix.sum(axis=1) - 1.0).max()
            rowsum_lines.append(f"R_{tag}_head{head} max |rowsum - 1| = {dev:.3e}")
    (out / "rowsums.txt").write_text("\n".join(rowsum_lines) + "\n", encoding="utf-8")
    print("\n".join(rowsum_lines))
    print(f"graph dumps -> {out}")
    return 0


def cmd_verify(args):
    cfg = _resolve_config(args)
    out = _write_manifest(args, cfg, [])
    lines = []

    def emit(line):
        lines.append(line)
        print(line)

    ok, results = vmod.run_checks(corrupt_op=args.corrupt_op, log_fn=emit)
    summary = f"{sum(1 for _, p, _ in results if p)}/{len(results)} checks passed"
    emit(summary)
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if not ok:
        failed = [name for name, passed, _ in results if not passed]
        raise AssertionError(f"failed checks: {', '.join(failed)}")
    return 0


def main(argv=None):
    logging.basicConfig(level=getattr(logging, os.environ.get("IGFORMER_LOG", "WARNING").upper(),
                                      logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _load_manifest_overrides(args)
        handler = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
                   "inspect-graph": cmd_inspect_graph, "verify": cmd_verify}[args.command]
        return handler(args)
    except (ConfigError, ParseError, FileNotFoundError, NotADirectoryError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
