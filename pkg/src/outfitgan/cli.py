"""Command-line entry point: ``outfitgan {synth-data,train,generate,eval}``.

Exit codes: 0 success, 2 usage error, 3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import ConfigError, config_hash, dump_config, load_config

log = logging.getLogger("outfitgan")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("OUTFITGAN_OUT", "runs")) / args.command


def resolve(args) -> tuple[dict, Path]:
    """Merge file config and flags, create the output dir, and write the resolved config there."""
    overrides = {}
    if args.seed is not None:
        overrides.update({"data.seed": args.seed, "train.seed": args.seed, "eval.seed": args.seed})
    if getattr(args, "iters", None) is not None:
        overrides["train.n_iter"] = args.iters
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        import yaml

        overrides[key.strip()] = yaml.safe_load(raw)
    cfg = load_config(args.config, overrides)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.yaml")
    (out / "run.json").write_text(
        json.dumps({"command": args.command, "config_hash": config_hash(cfg), "seed": cfg["train.seed"]}, indent=2)
    )
    return cfg, out


def _load_data(cfg):
    from .data import generate_synthetic_corpus, read_corpus

    root = cfg["data.root"]
    if root:
        return read_corpus(root)
    return generate_synthetic_corpus(
        cfg["data.seed"], cfg["data.n_outfits"], cfg["data.resolution"], cfg["data.n_categories"], cfg["data.split_ratio"]
    )


def cmd_synth_data(args) -> int:
    from .data import generate_synthetic_corpus, write_corpus

    cfg, out = resolve(args)
    split = generate_synthetic_corpus(
        cfg["data.seed"], cfg["data.n_outfits"], cfg["data.resolution"], cfg["data.n_categories"], cfg["data.split_ratio"]
    )
    manifest = write_corpus(split, out)
    print(f"train={len(split.train)} test={len(split.test)} manifest={manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import NonFiniteLossError, Trainer

    cfg, out = resolve(args)
    trainer = Trainer(cfg, _load_data(cfg), out)
    if args.resume:
        trainer.resume(args.resume, force=args.force)
        print(f"resumed at iteration {trainer.iteration}")
    try:
        for _ in trainer.run():
            pass
    except NonFiniteLossError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"finished at iteration {trainer.iteration}; checkpoints in {out / 'ckpt'}")
    return EXIT_OK


def _tile_grid(outfits: torch.Tensor) -> Image.Image:
    """(B, N, 3, R, R) in [-1, 1] -> one row of N tiles per outfit."""
    rows = [torch.cat(list(o), dim=2) for o in outfits]
    grid = torch.cat(rows, dim=1)
    u8 = ((grid.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    return Image.fromarray(u8, mode="RGB")


def cmd_generate(args) -> int:
    from .data import parse_given_spec, random_pool_silhouettes, stack_batch
    from .generator import syn_outfit
    from .training import models_from_checkpoint

    if not args.ckpt or len(args.ckpt) != 1:
        raise UsageError("generate needs exactly one --ckpt")
    cfg, out = resolve(args)
    models, state = models_from_checkpoint(args.ckpt[0])
    split = _load_data(state["config"])
    test = split.test[: args.n_outfits]
    n = test[0].n_items
    given = torch.as_tensor(np.tile(parse_given_spec(args.given, n), (len(test), 1)))
    images, sils = (torch.from_numpy(a) for a in stack_batch(test))
    if args.mask_source == "random-pool":
        rng = np.random.default_rng(cfg["eval.seed"])
        sils = torch.from_numpy(random_pool_silhouettes(test, split.test, rng))
    with torch.no_grad():
        comp, _ = syn_outfit(images, sils, given, models["E"], models["G"])
    path = out / "outfits.png"
    _tile_grid(comp).save(path)
    (out / "given.json").write_text(json.dumps({"given": args.given, "mask_source": args.mask_source,
                                                "outfits": [r.record_id for r in test]}, indent=2))
    print(f"wrote {path} ({len(test)} outfits, {int((1 - given[0]).sum())} synthesized per outfit)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .losses import TapNetwork
    from .metrics import EmbeddingSpreadPredictor, evaluate_run, model_synthesizer, tournament, write_report
    from .training import models_from_checkpoint

    if not args.ckpt:
        raise UsageError("eval needs at least one --ckpt")
    cfg, out = resolve(args)
    loaded = []
    for path in args.ckpt:
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        loaded.append((path, *models_from_checkpoint(path)))
    split = _load_data(loaded[0][2]["config"])
    test = split.test if cfg["eval.max_outfits"] is None else split.test[: cfg["eval.max_outfits"]]
    feature_net = TapNetwork(seed=4321)
    # one shared predictor keeps compatibility scores comparable across runs
    predictor = EmbeddingSpreadPredictor(loaded[0][1]["D_coll"])
    reports = {}
    for path, models, state in loaded:
        name = f"{Path(path).parent.parent.name}/{Path(path).name}"
        reports[name] = evaluate_run(
            model_synthesizer(models["E"], models["G"]),
            test,
            settings=cfg["eval.settings"],
            feature_net=feature_net,
            predictor=predictor,
            seed=cfg["eval.seed"],
            meta={"checkpoint": str(path), "iteration": state["iteration"], "config_hash": state["config_hash"],
                  "seed": cfg["eval.seed"]},
        )
    if len(reports) >= 2:
        tournament(reports)
    else:
        log.warning("single checkpoint: best-times tournament skipped")
    write_report(out / "report.json", reports, {"n_test_outfits": len(test), "settings": cfg["eval.settings"]})
    for name, r in reports.items():
        print(name, "SSIM", r.ssim, "FID", r.fid, "F2BT", r.f2bt)
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "generate": cmd_generate, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="YAML or key=value config file")
    common.add_argument("--seed", type=int, help="overrides data/train/eval seeds")
    common.add_argument("--out", type=str, help="output directory (default $OUTFITGAN_OUT/<command>)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")

    parser = argparse.ArgumentParser(prog="outfitgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="generate and split the synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="run adversarial training")
    p.add_argument("--iters", type=int, help="total iterations (train.n_iter)")
    p.add_argument("--resume", type=str, help="checkpoint directory to resume from")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    p = sub.add_parser("generate", parents=[common], help="synthesize complementary items for test outfits")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--given", type=str, required=True, help='e.g. "1,0,0,0"')
    p.add_argument("--mask-source", choices=("real", "random-pool"), default="real")
    p.add_argument("--n-outfits", type=int, default=8)

    p = sub.add_parser("eval", parents=[common], help="SSIM / FID / best-times report")
    p.add_argument("--ckpt", nargs="+", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:
        from .training import CheckpointError

        if isinstance(exc, CheckpointError):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
