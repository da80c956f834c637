"""``babynet`` command line: synth, train, cv, predict, gradcheck.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (
    AugmentPolicy,
    DatasetError,
    SyntheticConfig,
    generate_synthetic_dataset,
    read_dataset,
    write_dataset,
)
from .evaluation import (
    PredictionRow,
    ensemble_average,
    grouped_kfold_split,
    read_estimates_csv,
    run_cross_validation,
    write_predictions_csv,
)
from .gradcheck import finite_difference_check
from .io import TensorFormatError
from .model import VARIANTS, BabyNet, ConfigError, ModelConfig, build_model, count_parameters
from .ops import mse_loss
from .tensor import Tensor, no_grad
from .training import NumericError, TargetScaler, TrainConfig, predict_patient, train

log = logging.getLogger("babynet")

EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULTS = {
    "variant": "rtm_tpe",
    "frames": 16,
    "height": 64,
    "width": 64,
    "heads": 4,
    "width_mult": "1",
    "bn_momentum": 0.1,
    "bn_eps": 1e-5,
    "epochs": 200,
    "batch_size": 2,
    "lr": 1e-4,
    "lr_decay": 0.1,
    "lr_step": 160,
    "weight_decay": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "raw_targets": False,
    "augment": True,
    "rotate": 25.0,
    "flip_p": 0.5,
    "blur_p": 0.5,
    "folds": 5,
}

# stage 5 collapses to 1x1x1 at 8x16x16; batch 2 then leaves train-mode BN
# two values per channel, so the desk preset trains with batch 8
PRESETS = {
    "full": {},
    "desk": {"frames": 8, "height": 16, "width": 16, "width_mult": "1/8", "epochs": 30, "batch_size": 8, "lr": 1e-3},
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    out: str | None = None
    seed: int = 0
    preset: str = "full"
    settings: dict = field(default_factory=dict)

    def model_config(self, variant: str | None = None) -> ModelConfig:
        s = self.settings
        return ModelConfig(
            variant=variant or s["variant"],
            in_frames=s["frames"],
            in_height=s["height"],
            in_width=s["width"],
            num_heads=s["heads"],
            width_multiplier=Fraction(s["width_mult"]),
            bn_momentum=s["bn_momentum"],
            bn_eps=s["bn_eps"],
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        s = self.settings
        policy = AugmentPolicy(enabled=s["augment"], rotate_deg=s["rotate"], flip_p=s["flip_p"], blur_p=s["blur_p"])
        return TrainConfig(
            epochs=s["epochs"],
            batch_size=s["batch_size"],
            lr=s["lr"],
            lr_decay=s["lr_decay"],
            lr_step_epochs=s["lr_step"],
            weight_decay=s["weight_decay"],
            beta1=s["beta1"],
            beta2=s["beta2"],
            adam_eps=s["adam_eps"],
            seed=self.seed,
            raw_targets=s["raw_targets"],
            augment=policy,
        )

    def save(self, directory) -> None:
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "config.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the preset, then explicit flags."""
    settings = dict(DEFAULTS)
    settings.update(PRESETS[args.preset])
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return RunConfig(
        command=args.command,
        data=getattr(args, "data", None),
        out=getattr(args, "out", None),
        seed=args.seed,
        preset=args.preset,
        settings=settings,
    )


# -- commands ----------------------------------------------------------------

def _load_dataset(path) -> list:
    if path is None or not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return read_dataset(path)


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        num_patients=args.patients,
        videos_per_patient=args.videos,
        frames_per_video=args.frames_per_video,
        frame_size=(args.frame_size, args.frame_size),
        noise_sigma=args.noise,
        seed=args.seed,
        weight_range=(args.weight_min, args.weight_max),
    )
    records = generate_synthetic_dataset(cfg)
    write_dataset(args.out, records)
    meta = asdict(cfg)
    (Path(args.out) / "synth_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} patients to {args.out}")
    return 0


def _write_parameter_manifest(path, model: BabyNet) -> None:
    lines = [f"{name}\t{'x'.join(map(str, p.shape))}\t{p.size}" for name, p in model.named_parameters()]
    lines.append(f"total\t-\t{count_parameters(model)}")
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(args) -> int:
    run = resolve_run_config(args)
    records = _load_dataset(run.data)
    if args.fold is not None:
        folds = grouped_kfold_split([r.patient_id for r in records], run.settings["folds"], args.split_seed)
        if not 0 <= args.fold < len(folds):
            raise UsageError(f"--fold must be in [0, {len(folds)})")
        held = set(folds[args.fold])
        records = [r for r in records if r.patient_id not in held]
    model = build_model(run.model_config())
    out = Path(run.out)
    run.save(out)
    _write_parameter_manifest(out / "parameters.txt", model)
    result = train(model, records, run.train_config(), out)
    print(f"trained {run.settings['variant']} for {len(result.losses)} epochs; final train_mse {result.losses[-1]:.6f}")
    return 0


def cmd_cv(args) -> int:
    run = resolve_run_config(args)
    records = _load_dataset(run.data)
    run.save(run.out)
    variants = VARIANTS if args.ablation else (run.settings["variant"],)
    for variant in variants:
        report = run_cross_validation(
            records,
            run.model_config(variant),
            run.train_config(),
            k=run.settings["folds"],
            split_seed=args.split_seed,
            out_dir=Path(run.out) / variant,
            jobs=args.jobs,
        )
        agg = report.aggregate()
        print(f"{variant}: mMAE {agg['mmae']:.1f} g  mRMSE {agg['mrmse']:.1f} g  mMAPE {agg['mmape']:.2f} %")
    return 0


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if (ckpt / "checkpoint").is_dir():
        ckpt = ckpt / "checkpoint"
    model, meta = BabyNet.load(ckpt)
    scaler = TargetScaler(float(meta.get("scaler_mean", 0.0)), float(meta.get("scaler_std", 1.0)))
    records = _load_dataset(args.data)
    rows = [PredictionRow(r.patient_id, r.birth_weight_g, predict_patient(model, r, scaler), -1) for r in records]
    ensemble = estimates = None
    if args.estimates:
        estimates = read_estimates_csv(args.estimates)
        known = {r.patient_id for r in rows}
        unknown = [pid for pid in estimates if pid not in known]
        if unknown:
            raise UsageError(f"estimates file names unknown patient id(s): {', '.join(unknown)}")
        missing = [pid for pid in known if pid not in estimates]
        if missing:
            raise UsageError(f"estimates file lacks patient id(s): {', '.join(sorted(missing))}")
        ensemble = ensemble_average({r.patient_id: r.pred_g for r in rows}, estimates)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(args.out, rows, ensemble, estimates)
    print(f"wrote {len(rows)} predictions to {args.out}")
    return 0


def gradcheck_model(model: BabyNet, batch: int, seed: int, samples: int, eps: float, tol: float):
    """Full-model finite-difference check with BN in eval mode.

    Running statistics are first warmed with a few train-mode passes so the
    eval-mode network is a smooth function of its parameters between ReLU
    kinks.
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    shape = (batch, 1, cfg.in_frames, cfg.in_height, cfg.in_width)
    model.train()
    with no_grad():
        for _ in range(3):
            model(Tensor(rng.random((max(batch, 4), *shape[1:]))))
    model.eval()
    x = Tensor(rng.random(shape))
    y = Tensor(rng.normal(size=(batch, 1)))
    return finite_difference_check(
        lambda: mse_loss(model(x), y), dict(model.named_parameters()), eps=eps, tol=tol, num_samples=samples, seed=seed
    )


def cmd_gradcheck(args) -> int:
    run = resolve_run_config(args)
    model = build_model(run.model_config())
    report = gradcheck_model(model, args.batch, run.seed, args.samples, args.eps, args.tol)
    text = report.summary()
    print(text)
    for name, err in sorted(report.per_parameter.items(), key=lambda kv: -kv[1]):
        print(f"  {name}\t{err:.3e}")
    if run.out:
        run.save(run.out)
        (Path(run.out) / "gradcheck.txt").write_text(text + "\n")
    return 0 if report.passed else EXIT_NUMERIC


# -- argument parsing --------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (defaults give the full-size recipe; see --preset)")
    g.add_argument("--preset", choices=sorted(PRESETS), default="full")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--frames", type=int, help="input frames T0 (segment length)")
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--width-mult", dest="width_mult", help="channel width multiplier, e.g. 1/8")
    g.add_argument("--bn-momentum", dest="bn_momentum", type=float)
    g.add_argument("--bn-eps", dest="bn_eps", type=float)
    g.add_argument("--seed", type=int, default=0)


def _add_train_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--lr-decay", dest="lr_decay", type=float)
    g.add_argument("--lr-step", dest="lr_step", type=int, help="epochs between learning-rate decays")
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--adam-eps", dest="adam_eps", type=float)
    g.add_argument("--raw-targets", dest="raw_targets", action="store_const", const=True,
                   help="regress grams directly instead of per-fold standardized targets")
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    g.add_argument("--rotate", type=float, help="max rotation in degrees")
    g.add_argument("--flip-p", dest="flip_p", type=float)
    g.add_argument("--blur-p", dest="blur_p", type=float)
    g.add_argument("--folds", type=int)
    g.add_argument("--split-seed", dest="split_seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="babynet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (1 gives bitwise reproducibility)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ellipse-video dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=15)
    p.add_argument("--videos", type=int, default=3)
    p.add_argument("--frames-per-video", type=int, default=32)
    p.add_argument("--frame-size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--weight-min", type=float, default=2085.0)
    p.add_argument("--weight-max", type=float, default=4995.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, help="hold out this fold and train on the rest")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="patient-grouped k-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", action="store_true", help="run base, rtm and rtm_tpe")
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel processes")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict", help="patient-level predictions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")
    p.add_argument("--estimates", help="external patient_id,estimate_g CSV to ensemble with")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--out")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=2)
    _add_model_args(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except NumericError as exc:
        print(f"babynet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, DatasetError, TensorFormatError, KeyError, ValueError, OSError) as exc:
        print(f"babynet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
