"""Command-line entry points.

Exit codes: 0 success, 2 user/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    GenerationError,
    IngestionError,
    NumericalError,
    SSRefineError,
    TrainingAbort,
)


def _cmd_gen_data(args) -> int:
    from .dataeval import DomainSpec, builtin_spec, write_dataset

    if args.spec in ("toy-source", "toy-target"):
        spec = builtin_spec(args.spec)
    else:
        spec = DomainSpec.from_json(args.spec)
    write_dataset(args.out, spec, args.count, args.seed)
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .harness import TrainConfig, train

    cfg = TrainConfig.from_json(args.config)

    def progress(step, row):
        print(
            f"step {step}/{cfg.steps} total={row['loss_total']:.4f} "
            f"src={row['loss_src']:.4f} scc={row['loss_scc']:.4f} "
            f"hdce={row['loss_hdce']:.4f} gan_g={row['loss_gan_g']:.4f} "
            f"gan_d={row['loss_gan_d']:.4f}",
            flush=True,
        )

    ckpt_path, log_path = train(cfg, args.out, progress=progress)
    print(f"checkpoint: {ckpt_path}")
    print(f"run log:    {log_path}")
    return 0


def _cmd_refine(args) -> int:
    from .dataeval import load_image_folder, save_image
    from .harness import load_checkpoint
    from .tensorcore import Tensor, no_grad, precision

    state = load_checkpoint(args.ckpt)
    cfg = state.config
    images = load_image_folder(args.in_dir, size=cfg.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with precision(cfg.precision), no_grad():
        for lo in range(0, len(images), cfg.batch_size):
            chunk = images[lo : lo + cfg.batch_size]
            batch = Tensor(np.stack([img for _, img in chunk]))
            refined, _ = state.gen.generate(batch)
            for (name, _), img in zip(chunk, refined.data):
                save_image(img, out / name)
    print(f"refined {len(images)} images into {out}")
    return 0


def _cmd_eval(args) -> int:
    from .dataeval import builtin_spec, DomainSpec, evaluate_refiner, read_dataset
    from .harness import load_checkpoint
    from .tensorcore import precision

    state = load_checkpoint(args.ckpt)
    cfg = state.config
    scenes, _ = read_dataset(args.data)
    if cfg.target_data in ("toy-source", "toy-target"):
        target_spec = builtin_spec(cfg.target_data)
    elif cfg.target_data.endswith(".json"):
        target_spec = DomainSpec.from_json(cfg.target_data)
    else:
        raise ConfigError("target_data", "checkpoint was trained without a target domain spec")
    with precision(cfg.precision):
        report = evaluate_refiner(state.gen, scenes, target_spec)
    report_path = Path(args.report)
    json_path = report_path.with_suffix(".json")
    csv_path = report_path.with_suffix(".csv")
    report.to_json(json_path)
    report.to_csv(csv_path)
    print(
        f"pixel_acc={report.pixel_acc:.4f} class_acc={report.class_acc:.4f} "
        f"mean_iou={report.mean_iou:.4f}"
    )
    print(f"report: {json_path} {csv_path}")
    return 0


def _cmd_plot(args) -> int:
    from .svgplot import write_loss_plot

    if not Path(args.log).is_file():
        raise IngestionError(args.log, "run log not found")
    write_loss_plot(args.log, args.out)
    print(f"plot: {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssrefine",
        description="Contrastive refinement of synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy scene dataset")
    p.add_argument("--spec", required=True,
                   help="domain spec JSON path, or builtin 'toy-source' / 'toy-target'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", required=True, type=int, help="number of scenes")
    p.add_argument("--seed", required=True, type=int, help="base seed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a refiner")
    p.add_argument("--config", required=True, help="training config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("refine", help="run a trained refiner over an image folder")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--in", dest="in_dir", required=True, help="input image directory")
    p.add_argument("--out", required=True, help="output image directory")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="score a trained refiner on a labeled dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="gen-data directory with labels")
    p.add_argument("--report", required=True, help="report path (writes .json and .csv)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("plot", help="render loss curves from a run log to SVG")
    p.add_argument("--log", required=True, help="runlog.csv from training")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingAbort as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, IngestionError, CheckpointError, ContractError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SSRefineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
