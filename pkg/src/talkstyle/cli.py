"""``talkstyle`` command line: gen-data, label, train, adapt, synth, eval.

Every option can also come from ``--config FILE`` (JSON object or
``key=value`` lines, keys named like the long options with ``_`` for ``-``);
flags given on the command line win. Each run writes its resolved options
next to its main output as ``<output>.config.json``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 lip metadata, 5 checkpoint or topology
mismatch, 6 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .audio import AudioFormatError, filterbank_features, load_features, load_waveform
from .dataset import load_corpus, read_manifest
from .evaluation import evaluate
from .mesh import LipMetadataError, MeshFormatError, MeshSequence, TopologyError, apply_template, load_msq, load_template, save_msq
from .model import ModelConfig, check_compatible, init_model, n_frames_for, synthesize
from .numerics import CheckpointError, load_checkpoint, save_checkpoint
from .optimization import (
    HISTORY_FIELDS,
    AdaptConfig,
    ConfigurationError,
    DivergenceError,
    TrainConfig,
    adapt,
    precompute_visemes,
    select_init_identity,
    train,
)
from .oracle import export_corpus
from .supervision import LossWeights, label_sequence, load_timings, save_weights
from .viseme import DecoderConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_META, EXIT_COMPAT, EXIT_DIVERGED = 0, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


# option tables: (flag, type, default, help); default None means required unless noted
_COMMANDS = {
    "gen-data": {
        "help": "export a synthetic multi-speaker corpus",
        "opts": [
            ("--out", str, None, "output directory"),
            ("--speakers", int, None, "number of speakers"),
            ("--sequences", int, None, "sequences per speaker"),
            ("--seed", int, None, "corpus seed"),
            ("--heldout", int, -1, "held-out speakers (default: a quarter)"),
        ],
    },
    "label": {
        "help": "detect bilabial closures and write per-frame lip-loss weights",
        "opts": [
            ("--mesh", str, None, "mesh sequence (.msq)"),
            ("--timings", str, None, "phoneme timing file"),
            ("--template", str, None, "template mesh (.msq with .json lip sidecar)"),
            ("--meta", str, "", "lip metadata JSON (default: template sidecar)"),
            ("--out", str, None, "weights file to write"),
            ("--radius", int, 2, "window radius in frames"),
            ("--sigma", float, 1.0, "Gaussian width in frames"),
            ("--window", int, 0, "search window before each onset in frames (0: a quarter second)"),
            ("--binary", bool, False, "box weights instead of Gaussian"),
        ],
    },
    "train": {
        "help": "train the style-agnostic model on a corpus manifest",
        "opts": [
            ("--manifest", str, None, "corpus manifest.json"),
            ("--out", str, None, "checkpoint to write (.ckpt)"),
            ("--loss-csv", str, "", "loss history CSV (default: <out>.losses.csv)"),
            ("--epochs", int, 300, "training epochs"),
            ("--lr", float, 1e-4, "Adam learning rate"),
            ("--seed", int, 0, "initialisation and shuffling seed"),
            ("--lambda-mse", float, 1.0, "reconstruction loss weight"),
            ("--lambda-vel", float, 10.0, "velocity loss weight"),
            ("--lambda-lip", float, 5.0, "lip contact loss weight"),
            ("--layers", int, 2, "decoder layers"),
            ("--clip", float, 1.0, "gradient clipping norm (0 disables)"),
            ("--weights-dir", str, "", "directory of <id>.w closure weights (default: label on the fly)"),
        ],
    },
    "adapt": {
        "help": "adapt a trained model to a held-out speaker in two stages",
        "opts": [
            ("--checkpoint", str, None, "trained checkpoint"),
            ("--manifest", str, None, "corpus manifest.json"),
            ("--speaker", str, "", "held-out speaker name (default: first with adapt sequences)"),
            ("--references", int, 0, "use only the first N reference sequences (0: all)"),
            ("--out", str, None, "adapted checkpoint to write"),
            ("--report", str, "", "report JSON (default: <out>.report.json)"),
            ("--stage1-epochs", int, None, "style-vector epochs"),
            ("--stage2-epochs", int, None, "style + deformation-basis epochs"),
            ("--init-identity", str, None, "training identity for initialisation, or 'auto'"),
            ("--lr", float, 1e-4, "Adam learning rate"),
            ("--lambda-mse", float, 1.0, "reconstruction loss weight"),
            ("--lambda-vel", float, 10.0, "velocity loss weight"),
            ("--clip", float, 1.0, "gradient clipping norm (0 disables)"),
        ],
    },
    "synth": {
        "help": "animate a template from audio features or a WAV file",
        "opts": [
            ("--checkpoint", str, None, "trained or adapted checkpoint"),
            ("--features", str, "", "feature file (.ftr)"),
            ("--audio", str, "", "16-bit PCM mono WAV (alternative to --features)"),
            ("--template", str, None, "template mesh"),
            ("--out", str, None, "mesh sequence to write (.msq)"),
            ("--identity", int, -1, "training identity (default: adapted style, else 0)"),
            ("--frames", int, 0, "output frames (default: from the audio duration)"),
            ("--fps", float, 30.0, "output frame rate"),
        ],
    },
    "eval": {
        "help": "compare predicted and ground-truth mesh sequences",
        "opts": [
            ("--pred", "list", None, "predicted .msq (repeat for several)"),
            ("--gt", "list", None, "ground-truth .msq, paired in order"),
            ("--template", str, None, "template mesh with lip metadata"),
            ("--out", str, None, "metric CSV to write"),
        ],
    },
}


def _key(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talkstyle", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, spec in _COMMANDS.items():
        p = sub.add_parser(name, help=spec["help"], description=spec["help"])
        p.set_defaults(usage=p.format_usage)
        p.add_argument("--config", default=None, help="JSON or key=value file with default options")
        for flag, typ, default, text in spec["opts"]:
            dest = _key(flag)
            note = " (required)" if default is None else f" (default: {default!r})"
            if typ is bool:
                p.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=text + note)
            elif typ == "list":
                p.add_argument(flag, dest=dest, action="append", default=None, help=text + note)
            else:
                p.add_argument(flag, dest=dest, type=typ, default=None, help=text + note)
    return parser


def _read_config(path) -> dict:
    text = Path(path).read_text()
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
        return data
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- config file <- command-line flags; unknown keys and missing required ones are usage errors."""
    spec = _COMMANDS[command]
    types = {_key(f): t for f, t, _, _ in spec["opts"]}
    resolved = {_key(f): d for f, _, d, _ in spec["opts"]}
    if args.config:
        cfg = _read_config(args.config)
        unknown = sorted(set(cfg) - set(types))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in cfg.items():
            resolved[k] = _coerce(k, v, types[k])
    for k in types:
        v = getattr(args, k)
        if v is not None:
            resolved[k] = v
    missing = [k for k, v in resolved.items() if v is None]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return resolved


def _coerce(key, value, typ):
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if typ == "list":
            return [str(v) for v in value] if isinstance(value, list) else [s for s in str(value).split(",") if s]
        return typ(value)
    except (TypeError, ValueError):
        raise UsageError(f"config key {key!r}: cannot read {value!r}") from None


def _write_sidecar(main_output, command: str, cfg: dict, extra: dict | None = None) -> None:
    record = {"command": command, "options": cfg}
    if extra:
        record.update(extra)
    Path(str(main_output) + ".config.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


# commands ------------------------------------------------------------------------------
def cmd_gen_data(cfg: dict) -> int:
    if cfg["speakers"] < 1 or cfg["sequences"] < 1:
        raise UsageError("--speakers and --sequences must be positive")
    heldout = None if cfg["heldout"] < 0 else cfg["heldout"]
    if heldout is not None and heldout >= cfg["speakers"]:
        raise UsageError("--heldout must leave at least one training speaker")
    path = export_corpus(cfg["speakers"], cfg["sequences"], cfg["out"], cfg["seed"], heldout)
    _write_sidecar(path, "gen-data", cfg)
    print(path)
    return EXIT_OK


def cmd_label(cfg: dict) -> int:
    if cfg["sigma"] <= 0:
        raise UsageError("--sigma must be positive")
    if cfg["radius"] < 0 or cfg["window"] < 0:
        raise UsageError("--radius and --window must be non-negative")
    tmpl = load_template(cfg["template"], cfg["meta"] or None)
    tmpl.require_lips()
    seq = load_msq(cfg["mesh"])
    if seq.n_vertices != tmpl.n_vertices:
        raise TopologyError(f"mesh has {seq.n_vertices} vertices, template {tmpl.n_vertices}")
    timings = load_timings(cfg["timings"])
    closures, w = label_sequence(seq, tmpl, timings, cfg["window"] or None, cfg["radius"], cfg["sigma"], cfg["binary"])
    save_weights(w, cfg["out"])
    _write_sidecar(cfg["out"], "label", cfg, {"closure_frames": closures})
    print(f"{len(closures)} closures -> {cfg['out']}")
    return EXIT_OK


def _write_history(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])


def cmd_train(cfg: dict) -> int:
    manifest = read_manifest(cfg["manifest"])
    items = load_corpus(cfg["manifest"], splits={"train", "val"})
    wdir = Path(cfg["weights_dir"]) if cfg["weights_dir"] else None

    def samples(split):
        out = []
        for it in items:
            if it.split != split:
                continue
            w = None
            if wdir is not None:
                wpath = wdir / f"{it.id}.w"
                if not wpath.exists():
                    raise ConfigurationError(f"no closure weights for {it.id} in {wdir}")
                w = np.array([float(x) for x in wpath.read_text().split()])
            out.append(it.sample(w))
        return out

    tr, va = samples("train"), samples("val")
    if not tr:
        raise ConfigurationError("manifest has no training sequences")
    n_ids = max(8, 1 + max(s.identity for s in tr))
    mcfg = ModelConfig(manifest["audio_dim"], manifest["n_vertices"], n_ids, DecoderConfig(n_layers=cfg["layers"]))
    params = init_model(mcfg, cfg["seed"])
    tcfg = TrainConfig(
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        lam=LossWeights(cfg["lambda_mse"], cfg["lambda_vel"], cfg["lambda_lip"]),
        seed=cfg["seed"],
        clip=cfg["clip"] or None,
    )
    result = train(tr, params, tcfg, va)
    save_checkpoint(result.params, cfg["out"])
    loss_csv = cfg["loss_csv"] or str(cfg["out"]) + ".losses.csv"
    _write_history(result.history, loss_csv)
    _write_sidecar(cfg["out"], "train", cfg, {"best_epoch": result.best_epoch, "loss_csv": loss_csv})
    print(f"checkpoint {cfg['out']} (best epoch {result.best_epoch})")
    return EXIT_OK


def cmd_adapt(cfg: dict) -> int:
    params = load_checkpoint(cfg["checkpoint"])
    items = load_corpus(cfg["manifest"], splits={"adapt", "heldout_test"})
    speaker = cfg["speaker"] or next((it.speaker for it in items if it.split == "adapt"), None)
    if speaker is None:
        raise ConfigurationError("manifest has no held-out speaker with reference sequences")
    refs = [it for it in items if it.speaker == speaker and it.split == "adapt"]
    if cfg["references"] > 0:
        refs = refs[: cfg["references"]]
    if not refs:
        raise ConfigurationError(f"speaker {speaker} has no reference sequences")
    tests = [it for it in items if it.speaker == speaker and it.split == "heldout_test"]
    tmpl = refs[0].template
    tmpl.require_lips()
    check_compatible(params, tmpl.n_vertices, refs[0].features.frames.shape[1])
    vis = precompute_visemes([r.features for r in refs], params, [r.mesh.n_frames for r in refs])
    meshes = [r.mesh for r in refs]
    if cfg["init_identity"] == "auto":
        # only identities that were actually trained are candidates
        trained = sorted({s["identity"] for s in read_manifest(cfg["manifest"])["speakers"] if s["identity"] is not None})
        init = select_init_identity(meshes, vis, params, tmpl, trained)
    else:
        try:
            init = int(cfg["init_identity"])
        except ValueError:
            raise UsageError("--init-identity must be an integer or 'auto'") from None
    for key in ("stage1_epochs", "stage2_epochs"):
        if cfg[key] < 0:
            raise UsageError(f"--{key.replace('_', '-')} must be non-negative")
    acfg = AdaptConfig(
        stage1_epochs=cfg["stage1_epochs"],
        stage2_epochs=cfg["stage2_epochs"],
        lr=cfg["lr"],
        lam=LossWeights(cfg["lambda_mse"], cfg["lambda_vel"], 0.0),
        init_identity=init,
        clip=cfg["clip"] or None,
    )
    eval_refs = eval_vis = None
    if tests:
        eval_refs = [t.mesh for t in tests]
        eval_vis = precompute_visemes([t.features for t in tests], params, [t.mesh.n_frames for t in tests])
    adapted, report = adapt(meshes, vis, params, tmpl, acfg, eval_refs, eval_vis)
    save_checkpoint(adapted, cfg["out"])
    report_path = cfg["report"] or str(cfg["out"]) + ".report.json"
    body = {"speaker": speaker, "references": [r.id for r in refs], "evaluated_on": [t.id for t in tests] or "references"}
    body.update(report.as_dict())
    Path(report_path).write_text(json.dumps(body, indent=1) + "\n")
    _write_sidecar(cfg["out"], "adapt", cfg, {"report": report_path})
    print(f"adapted checkpoint {cfg['out']}; L2_lip {report.l2_lip}")
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    if bool(cfg["features"]) == bool(cfg["audio"]):
        raise UsageError("give exactly one of --features and --audio")
    feats = load_features(cfg["features"]) if cfg["features"] else filterbank_features(load_waveform(cfg["audio"]))
    params = load_checkpoint(cfg["checkpoint"])
    tmpl = load_template(cfg["template"])
    mcfg = check_compatible(params, tmpl.n_vertices, feats.frames.shape[1])
    n = cfg["frames"] or n_frames_for(feats, cfg["fps"])
    style = None
    if cfg["identity"] >= 0:
        if cfg["identity"] >= mcfg.n_identities:
            raise UsageError(f"--identity must be below {mcfg.n_identities}")
        style = cfg["identity"]
    disp = synthesize(feats, params, style, n)
    save_msq(apply_template(disp, tmpl, cfg["fps"]), cfg["out"])
    _write_sidecar(cfg["out"], "synth", cfg)
    print(f"{n} frames -> {cfg['out']}")
    return EXIT_OK


def _positions(seq: MeshSequence, tmpl) -> MeshSequence:
    if seq.n_vertices != tmpl.n_vertices:
        raise TopologyError(f"sequence has {seq.n_vertices} vertices, template {tmpl.n_vertices}")
    return apply_template(seq.frames, tmpl, seq.fps) if seq.is_displacement else seq


def cmd_eval(cfg: dict) -> int:
    if len(cfg["pred"]) != len(cfg["gt"]):
        raise UsageError("--pred and --gt must be given the same number of times")
    tmpl = load_template(cfg["template"])
    tmpl.require_lips()
    preds = [_positions(load_msq(p), tmpl) for p in cfg["pred"]]
    gts = [_positions(load_msq(g), tmpl) for g in cfg["gt"]]
    for p, g in zip(preds, gts):
        if p.frames.shape != g.frames.shape:
            raise TopologyError(f"shape mismatch {p.frames.shape} vs {g.frames.shape}")
    report = evaluate(preds, gts, tmpl)
    Path(cfg["out"]).write_text(report.csv_text())
    _write_sidecar(cfg["out"], "eval", cfg)
    print(report.table())
    return EXIT_OK


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "label": cmd_label,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, bad flags exit 2
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = resolve(args.command, args)
        return _HANDLERS[args.command](cfg)
    except (UsageError, ConfigurationError) as exc:
        sys.stderr.write(args.usage())
        print(f"talkstyle {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LipMetadataError as exc:
        print(f"talkstyle {args.command}: lip metadata: {exc}", file=sys.stderr)
        return EXIT_META
    except (CheckpointError, TopologyError) as exc:
        print(f"talkstyle {args.command}: incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except DivergenceError as exc:
        print(f"talkstyle {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, MeshFormatError, AudioFormatError, json.JSONDecodeError, KeyError) as exc:
        print(f"talkstyle {args.command}: I/O: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
