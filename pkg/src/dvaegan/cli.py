"""Single command-line entry point: synth | train | reconstruct | evaluate | rate.

Settings come from an optional JSON config file (strictly validated, unknown
keys rejected) overridden by command-line flags; every default is visible in
--help. Exit codes: 0 success, 1 runtime failure, 2 configuration error.
DVAEGAN_THREADS caps numerical worker threads and must be applied before the
numeric stack loads, so heavy imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, ValidationError

SCHEMA_VERSION = 1

SECTION_DEFAULTS = {
    "synth": {
        "out": "dataset",
        "family": "geometric-shapes",
        "n_train": 1200,
        "n_test": 50,
        "d_x": 2048,
        "noise_sigma": 0.1,
        "image_hw": 100,
        "channels": 1,
        "nonlinearity": False,
        "seed": 0,
    },
    "train": {
        "dataset": "dataset",
        "out": "run",
        "epochs": [10, 10, 5],
        "batch_size": 32,
        "lr": 3e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "decay_rate": 0.98,
        "stage3_lr_scale": 0.1,
        "lambda_rec": 1.0,
        "lambda_prior": 1.0,
        "ablation": "full",
        "d_z": 64,
        "cog_hidden": 512,
        "conv_channels": [32, 64, 128],
        "stage": 1,
        "checkpoint": None,
        "reinit_disc_per_stage": False,
        "seed": 0,
    },
    "reconstruct": {
        "checkpoint": None,
        "signals": None,
        "out": "recons",
        "pgm": True,
    },
    "evaluate": {
        "checkpoint": None,
        "recons": None,
        "dataset": "dataset",
        "out": "eval",
        "seed": 0,
    },
    "rate": {
        "session_file": "session.json",
        "recons": None,
        "dataset": None,
        "bind": "127.0.0.1:8420",
        "force_result": False,
        "ui_dir": None,
        "events": None,
        "serve": True,
        "score": False,
        "out": None,
        "seed": 0,
    },
}


def load_config_file(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    if doc.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"config version must be {SCHEMA_VERSION}, got {doc.get('version')!r}")
    unknown = set(doc) - set(SECTION_DEFAULTS) - {"version"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name, section in doc.items():
        if name == "version":
            continue
        if not isinstance(section, dict):
            raise ConfigError(f"section {name!r} must be an object")
        bad = set(section) - set(SECTION_DEFAULTS[name])
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
    return doc


def resolve_section(name, args):
    """defaults <- config file section <- explicit CLI flags."""
    merged = dict(SECTION_DEFAULTS[name])
    if args.config:
        merged.update(load_config_file(args.config).get(name, {}))
    for key in SECTION_DEFAULTS[name]:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if args.seed is not None and "seed" in merged:
        merged["seed"] = args.seed
    return merged


def _apply_thread_cap():
    cap = os.environ.get("DVAEGAN_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def cmd_synth(args):
    cfg = resolve_section("synth", args)
    from . import data

    params = data.SynthParams(
        family=cfg["family"],
        d_x=int(cfg["d_x"]),
        noise_sigma=float(cfg["noise_sigma"]),
        nonlinearity=bool(cfg["nonlinearity"]),
        image_hw=int(cfg["image_hw"]),
        channels=int(cfg["channels"]),
    )
    dataset = data.make_synthetic_dataset(params, int(cfg["n_train"]), int(cfg["n_test"]), seed=int(cfg["seed"]))
    manifest = data.save_manifest(dataset, cfg["out"])
    print(
        f"wrote {dataset.n_train} train / {dataset.n_test} test pairs "
        f"(family={cfg['family']}, d_x={cfg['d_x']}, {cfg['image_hw']}x{cfg['image_hw']}) "
        f"to {manifest.parent}"
    )
    return 0


def _arch_from_train_cfg(dataset, tcfg, cfg):
    from . import train

    return train.default_arch(
        dataset,
        tcfg,
        d_z=int(cfg["d_z"]),
        cog_hidden=int(cfg["cog_hidden"]),
        conv_channels=tuple(int(c) for c in cfg["conv_channels"]),
    )


def cmd_train(args):
    cfg = resolve_section("train", args)
    from . import data, train

    dataset = data.load_manifest(cfg["dataset"])
    tcfg = train.TrainConfig(
        lr=float(cfg["lr"]),
        beta1=float(cfg["beta1"]),
        beta2=float(cfg["beta2"]),
        decay_rate=float(cfg["decay_rate"]),
        batch_size=int(cfg["batch_size"]),
        epochs=tuple(cfg["epochs"]),
        seed=int(cfg["seed"]),
        ablation=cfg["ablation"],
        stage3_lr_scale=float(cfg["stage3_lr_scale"]),
        lambda_rec=float(cfg["lambda_rec"]),
        lambda_prior=float(cfg["lambda_prior"]),
        reinit_disc_per_stage=bool(cfg["reinit_disc_per_stage"]),
    )
    stage = int(cfg["stage"])
    bundle = None
    start_step = 0
    arch = None
    if stage > 1:
        if not cfg["checkpoint"]:
            raise ConfigError("--stage > 1 needs --checkpoint to resume from")
        bundle, meta, _ = train.load_checkpoint(cfg["checkpoint"])
        if meta["stage"] != stage - 1:
            raise ConfigError(
                f"checkpoint is for stage {meta['stage']}, cannot resume stage {stage}"
            )
        start_step = meta["step"]
        arch = bundle.arch
    else:
        arch = _arch_from_train_cfg(dataset, tcfg, cfg)
    bundle, tlog = train.train_full(
        dataset,
        tcfg,
        arch=arch,
        out_dir=cfg["out"],
        bundle=bundle,
        start_stage=stage,
        start_step=start_step,
    )
    for s in sorted(tlog.stages):
        log = tlog.stages[s]
        tail = "skipped" if log.skipped else f"{len(log.steps)} steps"
        print(f"stage {s}: {tail}" + (f", checkpoint {tlog.checkpoints[s]}" if s in tlog.checkpoints else ""))
    return 0


def _load_signal_inputs(path):
    """Either a dataset manifest (test split) or a directory of DVGT vectors."""
    from . import data

    p = Path(path)
    manifest = p / data.MANIFEST_NAME if p.is_dir() else p
    if manifest.name == data.MANIFEST_NAME and manifest.exists():
        dataset = data.load_manifest(manifest)
        names = [dataset.stimulus(i).id for i in dataset.test_idx]
        from .evaluate import masked_signal_matrix

        return names, masked_signal_matrix(dataset, dataset.test_idx)
    if p.is_dir():
        files = sorted(p.glob("*.dvgt"))
        if not files:
            raise ValidationError(f"no .dvgt signal files in {p}")
        import numpy as np

        rows = [data.read_tensor(f).data.reshape(-1) for f in files]
        return [f.stem for f in files], np.stack(rows)
    raise ValidationError(f"signals path {p} is neither a manifest nor a directory")


def cmd_reconstruct(args):
    cfg = resolve_section("reconstruct", args)
    if not cfg["checkpoint"] or not cfg["signals"]:
        raise ConfigError("reconstruct needs --checkpoint and --signals")
    from . import data, train
    from .autodiff import Tensor
    from . import model as md

    # test-time path uses only the cognitive encoder and the generator
    bundle, meta, report = train.load_checkpoint(cfg["checkpoint"], only=("e_cog", "gen"))
    names, signals = _load_signal_inputs(cfg["signals"])
    if signals.shape[1] != bundle.arch.d_x:
        raise ConfigError(
            f"signals have dim {signals.shape[1]}, checkpoint expects {bundle.arch.d_x}"
        )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    batch = 64
    for start in range(0, len(names), batch):
        x = Tensor(signals[start : start + batch])
        code = md.encode_batch(bundle.e_cog, x, bundle.arch, deterministic=True)
        recon = bundle.gen(code.mu).data
        for name, img in zip(names[start : start + batch], recon):
            data.write_tensor(out / f"{name}.dvgt", img.astype("float32"))
            if cfg["pgm"]:
                data.write_pgm(out / f"{name}.pgm", img)
    loaded = ", ".join(f"{k}={v} bytes" for k, v in sorted(report.items()))
    absent = sorted(set(bundle.networks()) - set(report))
    print(f"inference memory footprint: loaded {loaded}; not loaded: {', '.join(absent)}")
    print(f"wrote {len(names)} reconstructions to {out}")
    return 0


def cmd_evaluate(args):
    cfg = resolve_section("evaluate", args)
    from . import data, evaluate, train

    dataset = data.load_manifest(cfg["dataset"])
    stimuli = [dataset.stimulus(i) for i in dataset.test_idx]
    if cfg["recons"]:
        recon_dir = Path(cfg["recons"])
        recons = []
        for stim in stimuli:
            f = recon_dir / f"{stim.id}.dvgt"
            if not f.exists():
                raise ValidationError(f"missing reconstruction {f}")
            recons.append(data.read_tensor(f).data)
        report = evaluate.score_images(recons, stimuli, seed=int(cfg["seed"]))
        evaluate.write_report_files(report, recons, stimuli, cfg["out"])
    elif cfg["checkpoint"]:
        bundle, _, _ = train.load_checkpoint(cfg["checkpoint"])
        report = evaluate.make_report(bundle, dataset, seed=int(cfg["seed"]), out_dir=cfg["out"])
    else:
        raise ConfigError("evaluate needs --recons or --checkpoint")
    print(
        f"pcc {report.pcc_mean:.4f}+-{report.pcc_std:.4f}  "
        f"ssim {report.ssim_mean:.4f}+-{report.ssim_std:.4f}  "
        f"pixcom {report.pixcom:.4f}  (n={report.n_trials})"
    )
    return 0


def cmd_rate(args):
    cfg = resolve_section("rate", args)
    from . import data, rating

    session_file = Path(cfg["session_file"])
    events = Path(cfg["events"]) if cfg["events"] else session_file.with_suffix(".events.jsonl")
    if not session_file.exists():
        if not cfg["recons"] or not cfg["dataset"]:
            raise ConfigError(
                f"session file {session_file} missing; building one needs --recons and --dataset"
            )
        dataset = data.load_manifest(cfg["dataset"])
        stimuli = [dataset.stimulus(i) for i in dataset.test_idx]
        recon_dir = Path(cfg["recons"])
        recons = []
        for stim in stimuli:
            f = recon_dir / f"{stim.id}.dvgt"
            if not f.exists():
                raise ValidationError(f"missing reconstruction {f}")
            recons.append(data.read_tensor(f).data)
        session = rating.build_session(recons, stimuli, seed=int(cfg["seed"]))
        rating.save_session(session, session_file)
        print(f"built session {session.session_id} with {session.n_trials} trials -> {session_file}")
    session = rating.load_session(session_file)
    if cfg["score"]:
        service = rating.RatingService(session, events_path=events)
        status, result = service.result(force=bool(cfg["force_result"]))
        if status != 200:
            raise ValidationError(f"cannot score yet: {result}")
        out = Path(cfg["out"]) if cfg["out"] else session_file.with_suffix(".result.json")
        out.write_text(json.dumps(result, indent=1))
        print(f"pooled {result['pooled']:.4f} over {result['n_choices']} choices -> {out}")
        return 0
    if cfg["serve"]:
        service, httpd = rating.serve(
            session,
            bind=cfg["bind"],
            events_path=events,
            ui_dir=cfg["ui_dir"],
            force_result=bool(cfg["force_result"]),
        )
        host, port = httpd.server_address[:2]
        print(f"serving {session.n_trials} trials on http://{host}:{port} (events -> {events})")
        try:
            httpd.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            httpd.server_close()
    return 0


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file (strictly validated)")
    sub.add_argument("--seed", type=int, default=None, help="override the section seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dvaegan",
        description="Cross-modal signal-to-image reconstruction: synthesize data, "
        "train the staged model, reconstruct, evaluate, and run rating sessions.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subs = parser.add_subparsers(dest="command", required=True)

    d = SECTION_DEFAULTS["synth"]
    p = subs.add_parser("synth", help="generate a synthetic paired dataset", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--out", default=None, help=f"output directory (default {d['out']})")
    p.add_argument("--family", default=None, choices=["geometric-shapes", "digits-like-strokes"], help=f"stimulus family (default {d['family']})")
    p.add_argument("--n-train", dest="n_train", type=int, default=None, help=f"training pairs (default {d['n_train']})")
    p.add_argument("--n-test", dest="n_test", type=int, default=None, help=f"test pairs (default {d['n_test']})")
    p.add_argument("--d-x", dest="d_x", type=int, default=None, help=f"signal dimensionality (default {d['d_x']})")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None, help=f"response noise (default {d['noise_sigma']})")
    p.add_argument("--image-hw", dest="image_hw", type=int, default=None, help=f"image side length (default {d['image_hw']})")
    p.add_argument("--channels", type=int, default=None, help=f"image channels (default {d['channels']})")
    p.add_argument("--nonlinearity", action="store_const", const=True, default=None, help="apply tanh to responses")
    p.set_defaults(func=cmd_synth)

    d = SECTION_DEFAULTS["train"]
    p = subs.add_parser("train", help="run the staged training schedule", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--dataset", default=None, help=f"dataset directory (default {d['dataset']})")
    p.add_argument("--out", default=None, help=f"run directory for checkpoints/logs (default {d['out']})")
    p.add_argument("--epochs", nargs=3, type=int, default=None, metavar=("E1", "E2", "E3"), help=f"epochs per stage (default {d['epochs']})")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None, help=f"default {d['batch_size']}")
    p.add_argument("--lr", type=float, default=None, help=f"base learning rate (default {d['lr']})")
    p.add_argument("--decay-rate", dest="decay_rate", type=float, default=None, help=f"per-epoch decay (default {d['decay_rate']})")
    p.add_argument("--stage3-lr-scale", dest="stage3_lr_scale", type=float, default=None, help=f"default {d['stage3_lr_scale']}")
    p.add_argument("--lambda-rec", dest="lambda_rec", type=float, default=None, help=f"reconstruction weight (default {d['lambda_rec']})")
    p.add_argument("--lambda-prior", dest="lambda_prior", type=float, default=None, help=f"prior weight (default {d['lambda_prior']})")
    p.add_argument("--ablation", default=None, choices=["full", "vae-gan", "cnn-encoder"], help=f"default {d['ablation']}")
    p.add_argument("--d-z", dest="d_z", type=int, default=None, help=f"latent dimensionality (default {d['d_z']})")
    p.add_argument("--cog-hidden", dest="cog_hidden", type=int, default=None, help=f"encoder hidden width (default {d['cog_hidden']})")
    p.add_argument("--conv-channels", dest="conv_channels", nargs="+", type=int, default=None, help=f"conv stack channels (default {d['conv_channels']})")
    p.add_argument("--stage", type=int, default=None, choices=[1, 2, 3], help="resume from this stage (needs --checkpoint)")
    p.add_argument("--checkpoint", default=None, help="checkpoint of the previous stage when resuming")
    p.add_argument("--reinit-disc", dest="reinit_disc_per_stage", action="store_const", const=True, default=None, help="re-init the discriminator at stages 2 and 3")
    p.set_defaults(func=cmd_train)

    d = SECTION_DEFAULTS["reconstruct"]
    p = subs.add_parser("reconstruct", help="decode signals to images with e_cog + generator only", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint")
    p.add_argument("--signals", default=None, help="dataset directory (test split) or directory of .dvgt vectors")
    p.add_argument("--out", default=None, help=f"output directory (default {d['out']})")
    p.add_argument("--no-pgm", dest="pgm", action="store_const", const=False, default=None, help="skip PGM export")
    p.set_defaults(func=cmd_reconstruct)

    d = SECTION_DEFAULTS["evaluate"]
    p = subs.add_parser("evaluate", help="score reconstructions against test stimuli", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="reconstruct internally from this checkpoint")
    p.add_argument("--recons", default=None, help="directory of <stimulus-id>.dvgt reconstructions")
    p.add_argument("--dataset", default=None, help=f"dataset directory (default {d['dataset']})")
    p.add_argument("--out", default=None, help=f"report directory (default {d['out']})")
    p.set_defaults(func=cmd_evaluate)

    d = SECTION_DEFAULTS["rate"]
    p = subs.add_parser("rate", help="build and serve a 2AFC rating session", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_common(p)
    p.add_argument("--session-file", dest="session_file", default=None, help=f"session document (default {d['session_file']})")
    p.add_argument("--recons", default=None, help="reconstruction directory (to build a missing session)")
    p.add_argument("--dataset", default=None, help="dataset directory (to build a missing session)")
    p.add_argument("--bind", default=None, help=f"host:port (default {d['bind']})")
    p.add_argument("--force-result", dest="force_result", action="store_const", const=True, default=None, help="expose /api/result before all raters finish")
    p.add_argument("--ui-dir", dest="ui_dir", default=None, help="static UI bundle to serve at /")
    p.add_argument("--events", default=None, help="event log path (default <session>.events.jsonl)")
    p.add_argument("--no-serve", dest="serve", action="store_const", const=False, default=None, help="build/score only, do not serve")
    p.add_argument("--score", action="store_const", const=True, default=None, help="score the event log and write a result file")
    p.add_argument("--out", default=None, help="result file for --score (default <session>.result.json)")
    p.set_defaults(func=cmd_rate)
    return parser


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
