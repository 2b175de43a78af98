"""Command-line interface.

Subcommands: synth, features, train, eval, track, paramcount. Every command
takes --seed and --config; the config is a JSON file with optional "scene",
"framing" and "train" sections whose keys match the corresponding config
dataclasses.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .evaluate import ExperimentGrid, emit_plot_data, run_grid, track_file, write_track_csv
from .geometry import MicArray, SphericalGrid, default_array, delay_table
from .models import (
    TrainConfig,
    build_baseline_gcc,
    build_baseline_max,
    build_cross3d,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .scenegen import (
    SceneConfig,
    sample_rng,
    synthesize_trajectory_sample,
    synthetic_source,
    wav_corpus_provider,
    write_scene_metadata,
)
from .srpfeat import EnergyVad, FramingConfig, compute_input_tensor, save_features


def _load_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig.from_dict(cfg.get("scene", {}))


def _framing_config(cfg: dict) -> FramingConfig:
    return FramingConfig(**cfg.get("framing", {}))


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    section.setdefault("seed", seed)
    return TrainConfig.from_dict(section)


def _resolution(text: str) -> tuple[int, int]:
    try:
        n_theta, n_phi = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected RxC like 16x32, got {text!r}") from exc
    return n_theta, n_phi


def _array(path) -> MicArray:
    return MicArray.from_json(path) if path else default_array()


def _source_provider(args):
    if getattr(args, "corpus", None):
        return wav_corpus_provider(args.corpus)
    return synthetic_source


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    scene_cfg = _scene_config(cfg)
    framing = _framing_config(cfg)
    array = _array(args.array)
    provider = _source_provider(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        rng = sample_rng(args.seed, k)
        signals, scene = synthesize_trajectory_sample(
            scene_cfg, provider, rng, array=array, framing=framing
        )
        signals.to_wav(out / f"scene_{k:04d}.wav")
        write_scene_metadata(out / f"scene_{k:04d}.json", scene, framing)
    print(f"wrote {args.count} scene(s) to {out}")
    return 0


def cmd_features(args) -> int:
    cfg = _load_config(args.config)
    framing = _framing_config(cfg)
    array = _array(args.array)
    grid = SphericalGrid(*args.resolution)
    from .roomsim import MicSignals

    signals = MicSignals.from_wav(args.wav)
    delays = delay_table(array, grid)
    tensor = compute_input_tensor(
        signals.channels.astype(float), delays, framing, vad=EnergyVad()
    )
    save_features(args.out, tensor, grid, framing)
    print(f"wrote {tensor.data.shape} features to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    scene_cfg = _scene_config(cfg)
    framing = _framing_config(cfg)
    train_cfg = _train_config(cfg, args.seed)
    array = _array(args.array)
    grid = SphericalGrid(*args.resolution)
    if args.model == "cross3d":
        model = build_cross3d(*args.resolution, seed=args.seed)
    elif args.model == "baseline-max":
        model = build_baseline_max(seed=args.seed)
    else:
        model = build_baseline_gcc(array, scene_cfg.fs, seed=args.seed)

    def log(epoch, batch, loss):
        print(f"epoch {epoch} batch {batch}: loss {loss:.6f}", flush=True)

    ckpt, losses = train(
        model, train_cfg, scene_cfg, array, grid,
        framing=framing, source_provider=_source_provider(args), log=log,
    )
    save_checkpoint(args.out, ckpt)
    print(f"saved checkpoint ({len(losses)} batches) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    scene_cfg = _scene_config(cfg)
    framing = _framing_config(cfg)
    array = _array(args.array)
    checkpoints: dict = {}
    for path in args.checkpoint or []:
        ckpt = load_checkpoint(path)
        model = model_from_checkpoint(ckpt, array=array, fs=scene_cfg.fs)
        if model.kind == "cross3d":
            res = (model.spec["n_theta"], model.spec["n_phi"])
        else:
            res = tuple(args.resolution[0]) if args.resolution else (16, 32)
        checkpoints.setdefault(res, {})[f"{model.kind}:{Path(path).stem}"] = model
    resolutions = tuple(args.resolution) if args.resolution else tuple(checkpoints) or ((16, 32),)
    grid = ExperimentGrid(
        t60s=tuple(args.t60),
        snrs=tuple(args.snr),
        resolutions=resolutions,
        trajectories_per_cell=args.trajectories,
        master_seed=args.seed,
    )
    rows = run_grid(grid, scene_cfg, array, checkpoints, framing=framing,
                    source_provider=_source_provider(args))
    emit_plot_data(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_track(args) -> int:
    cfg = _load_config(args.config)
    framing_kwargs = cfg.get("framing", {})
    array = _array(args.array)
    grid = SphericalGrid(*args.resolution) if args.resolution else None
    framing = FramingConfig(**framing_kwargs) if framing_kwargs else None
    rows = track_file(
        args.wav, array, checkpoint_path=args.checkpoint, grid=grid,
        framing=framing, vad_mode=args.vad,
    )
    write_track_csv(rows, args.out)
    print(f"wrote {len(rows)} frames to {args.out}")
    return 0


def cmd_paramcount(args) -> int:
    if args.model == "cross3d":
        model = build_cross3d(*args.resolution)
    elif args.model == "baseline-max":
        model = build_baseline_max()
    else:
        model = build_baseline_gcc(_array(args.array), args.fs)
    print(model.parameter_count())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srptrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--array", type=str, default=None, help="array geometry JSON")

    p = sub.add_parser("synth", help="synthesize random scenes to WAV + metadata")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--corpus", type=str, default=None, help="directory of dry source WAVs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="compute the SRP-PHAT input tensor for a WAV")
    common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--resolution", type=_resolution, default=(16, 32))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train a tracker on synthesized scenes")
    common(p)
    p.add_argument("--model", choices=["cross3d", "baseline-max", "baseline-gcc"], default="cross3d")
    p.add_argument("--resolution", type=_resolution, default=(16, 32))
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSAE sweep over T60/SNR/resolution cells")
    common(p)
    p.add_argument("--t60", type=float, nargs="+", required=True)
    p.add_argument("--snr", type=float, nargs="+", required=True)
    p.add_argument("--resolution", type=_resolution, nargs="+", default=None)
    p.add_argument("--trajectories", type=int, default=50)
    p.add_argument("--checkpoint", type=str, nargs="*", default=None)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", help="per-frame DOA estimates for a recording")
    common(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--resolution", type=_resolution, default=None)
    p.add_argument("--vad", choices=["energy", "all"], default="energy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("paramcount", help="trainable parameter total for a model")
    common(p)
    p.add_argument("--resolution", type=_resolution, default=(16, 32))
    p.add_argument("--model", choices=["cross3d", "baseline-max", "baseline-gcc"], required=True)
    p.add_argument("--fs", type=int, default=16000)
    p.set_defaults(func=cmd_paramcount)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
