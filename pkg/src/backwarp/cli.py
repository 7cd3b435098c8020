"""Command-line front end.

Subcommands: synth-data, train, infer, eval, order-check, gradcheck.  Runs
are reproducible: every command with the same config and seed writes
byte-identical outputs, and each run directory receives a serialized copy of
its configuration.  Exit codes: 0 ok, 2 config error, 3 I/O error,
4 numeric failure, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (BackwarpError, CheckpointError, ConfigError, ContractError,
                     DimensionError, IngestError, NumericError, RangeError)
from .flowio import flow_to_color, write_flo
from .model import Model, ModelConfig
from .synth import (DatasetManifest, SceneSpec, build_dataset, generate_scenes,
                    ingest_frames, load_sample, MANIFEST_NAME)
from .train import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5


def _fail(code: int, message: str) -> int:
    print(f"backwarp-error code={code} message={json.dumps(message)}", file=sys.stderr)
    return code


def _load_run_config(path) -> tuple[ModelConfig, TrainConfig, dict]:
    d = json.loads(Path(path).read_text())
    model_cfg = ModelConfig.from_dict(d.get("model", {}))
    train_cfg = TrainConfig.from_dict(d.get("train", {}))
    return model_cfg, train_cfg, d


def _model_from_checkpoint(ckpt_path, config_path=None) -> Model:
    entries = load_checkpoint(ckpt_path)
    if config_path is not None:
        model_cfg, _, _ = _load_run_config(config_path)
    else:
        sibling = Path(ckpt_path).parent / "config.json"
        if sibling.exists():
            model_cfg, _, _ = _load_run_config(sibling)
        else:
            model_cfg = ModelConfig()
    model = Model(model_cfg)
    model.load_state_entries(entries)
    return model


def cmd_synth_data(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    seed = args.seed if args.seed is not None else spec.get("seed", 0)
    if "scenes" in spec:
        scenes = [SceneSpec.from_dict(s) for s in spec["scenes"]]
    else:
        scenes = generate_scenes(
            count=spec.get("count", 10), seed=seed,
            height=spec.get("height", 64), width=spec.get("width", 64),
            n=spec.get("n", 7),
            constant_translation_fraction=spec.get("constant_translation_fraction", 0.3),
            min_speed=spec.get("min_speed", 0.5),
            max_speed=spec.get("max_speed", 3.0),
            rotation=spec.get("rotation", False))
    manifest = build_dataset(scenes, args.out, n=spec.get("n", 7),
                             split=spec.get("split", "train"))
    print(f"wrote {len(manifest)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, train_cfg, _ = _load_run_config(args.config)
    d = json.loads(Path(args.config).read_text())
    manifest_path = args.manifest or d.get("data", {}).get("manifest")
    if manifest_path is None:
        raise ConfigError("train needs --manifest or a data.manifest config entry")
    manifest = DatasetManifest.load(manifest_path)
    result = train(manifest, model_cfg, train_cfg, args.out, resume=args.resume,
                   quiet=args.quiet)
    from .figures import render_loss_curves
    render_loss_curves(result["log"], Path(args.out) / "loss_curves.png")
    print(f"final checkpoint: {result['checkpoint']}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .ordering import decide_order_from_output, apply_order
    from .pngio import read_png, write_png
    model = _model_from_checkpoint(args.ckpt, args.config)
    fi = model.indexing
    out_dir = Path(args.out)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    (out_dir / "flows").mkdir(exist_ok=True)
    b0 = read_png(args.input_a)[None]
    b1 = read_png(args.input_b)[None]
    out = model.infer(b0, b1)
    frames = np.stack([out.frame(1, p).data[0] for p in range(fi.n_total)])
    decisions = None
    if out.flows is not None:
        decisions = decide_order_from_output(out, 0)
        frames = apply_order(frames[:fi.n], frames[fi.n:], decisions)
    frames = np.clip(frames, 0.0, 1.0)
    for p in range(fi.n_total):
        write_png(out_dir / "frames" / f"frame_{p:03d}.png", frames[p])
    if out.flows is not None:
        flows = out.flows[0].data
        for m, (src, ref) in enumerate(fi.pairs):
            write_flo(out_dir / "flows" / f"flow_{m:02d}.flo", flows[m])
            write_png(out_dir / "flows" / f"flow_{m:02d}.png",
                      flow_to_color(flows[m]).astype(np.float32) / 255.0)
    meta = {
        "frames": fi.n_total,
        "flows": fi.n_flows if out.flows is not None else 0,
        "decisions": [d.to_dict() for d in decisions] if decisions else None,
    }
    (out_dir / "decisions.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {fi.n_total} frames to {out_dir / 'frames'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .figures import render_epe_per_flow, render_quality_per_frame
    from .metrics import evaluate
    model = _model_from_checkpoint(args.ckpt, args.config)
    manifest = DatasetManifest.load(args.manifest)
    report = evaluate(manifest, model)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(out_path)
    base = out_path.parent
    stem = out_path.stem
    report.write_csv(base / f"{stem}_frames.csv", base / f"{stem}_flows.csv")
    d = report.to_dict()
    render_quality_per_frame(d, base / f"{stem}_quality.png")
    render_epe_per_flow(d, base / f"{stem}_epe.png")
    print(f"interpolation PSNR {report.interp_psnr:.3f} dB SSIM {report.interp_ssim:.4f} | "
          f"deblurring PSNR {report.deblur_psnr:.3f} dB | "
          f"baseline PSNR {report.baseline_psnr:.3f} dB")
    return EXIT_OK


def cmd_order_check(args) -> int:
    from .ordering import decide_order_from_output
    model = _model_from_checkpoint(args.ckpt, args.config)
    manifest = DatasetManifest.load(args.manifest)
    records = []
    hits = 0
    total = 0
    for i in range(len(manifest)):
        s = load_sample(manifest, i)
        out = model.infer(s["blurs"][0][None], s["blurs"][1][None])
        d0, d1 = decide_order_from_output(out, 0)
        records.append({"sample": i,
                        "first": d0.to_dict(), "second": d1.to_dict()})
        hits += (not d0.reversed) + (not d1.reversed)
        total += 2
    result = {"accuracy": hits / total if total else None, "decisions": records}
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    print(f"ordering accuracy {result['accuracy']:.4f} over {total} decisions",
          file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(seed=args.seed, instances=args.instances)
    width = max(len(r.name) for r in results)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  instances={r.instances}  "
              f"max_rel_err={r.max_rel_err:.3e}")
        ok &= r.passed
    print(f"gradcheck: {'all passed' if ok else 'FAILURES PRESENT'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="backwarp",
        description="Deblur, interpolate and extrapolate sharp frames from "
                    "pairs of motion-blurred inputs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="render a synthetic dataset")
    s.add_argument("--spec", required=True, help="JSON scene/generator spec")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=None, help="override spec seed")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True, help="JSON run config")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--manifest", default=None, help="dataset manifest path")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="restore frames from one blurry pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input-a", required=True)
    s.add_argument("--input-b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="run config (defaults to ckpt sibling)")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--config", default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("order-check", help="report ordering decisions and accuracy")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default=None)
    s.add_argument("--config", default=None)
    s.set_defaults(fn=cmd_order_check)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=5)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, DimensionError, ContractError,
            RangeError) as e:
        return _fail(EXIT_CONFIG, str(e))
    except NumericError as e:
        return _fail(EXIT_NUMERIC, str(e))
    except (IngestError, OSError, json.JSONDecodeError) as e:
        return _fail(EXIT_IO, str(e))
    except BackwarpError as e:
        return _fail(EXIT_CONFIG, str(e))


if __name__ == "__main__":
    sys.exit(main())
