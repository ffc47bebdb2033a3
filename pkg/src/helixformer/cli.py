"""``helixformer`` command line: gen-data, pretrain, meta-train, eval, ablate, heatmap."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, generate_synthetic, load_dataset, read_ppm, read_raw_tensor, resize_bilinear
from .errors import ConfigurationError, DataError, HelixError
from .heatmap import pair_features, write_heatmaps
from .trainer import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    meta_train,
    model_from_checkpoint,
    pretrain_backbone,
    run_ablation,
    save_checkpoint,
    write_results_csv,
)

EXIT_CODES = {"config": 2}


# --------------------------------------------------------------------------
# config files


def parse_config_text(text: str, where: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dotted keys for nesting."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{where}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def split_config(flat: dict) -> tuple[dict, dict, dict]:
    """Separate ``data.*`` (synthetic generator), ``ablate.*`` and training keys."""
    data, ablate, train = {}, {}, {}
    for key, value in flat.items():
        if key.startswith("data."):
            data[key[5:]] = value
        elif key.startswith("ablate."):
            ablate[key[7:]] = value
        else:
            train[key] = value
    return data, ablate, train


def synthetic_spec(values: dict, seed: int | None) -> SyntheticSpec:
    kwargs = {}
    fields = SyntheticSpec.__dataclass_fields__
    for key, raw in values.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key 'data.{key}'")
        default = fields[key].default
        try:
            if key == "split_genera":
                kwargs[key] = tuple(int(p) for p in str(raw).replace(",", " ").split())
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"bad value {raw!r} for data.{key}") from exc
    if seed is not None:
        kwargs["seed"] = seed
    return SyntheticSpec(**kwargs)


def parse_cells(text: str) -> list[dict]:
    """``"variant=sym,stack=0; variant=qs"`` -> list of override dicts."""
    cells = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        cell = {}
        for item in chunk.split(","):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"bad ablation cell entry {item!r}")
            key, value = key.strip(), value.strip()
            cell[key] = {"on": "true", "off": "false"}.get(value, value) if key == "rep" else value
        cells.append(cell)
    if not cells:
        raise ConfigurationError("ablation matrix is empty")
    return cells


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=["qs", "sq", "asym-sq", "asym-qs", "sym"])
    common.add_argument("--heads", type=int)
    common.add_argument("--stack", type=int)
    common.add_argument("--embed", choices=["conv", "fc"])
    common.add_argument("--rep", choices=["on", "off"])
    common.add_argument("--episodes", type=int, help="evaluation episodes")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")

    parser = argparse.ArgumentParser(prog="helixformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset tree")
    p = sub.add_parser("pretrain", parents=[common], help="stage one: supervised backbone training")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("meta-train", parents=[common], help="stage two: episodic training")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained")
    p.add_argument("--resume")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on novel classes")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="novel", choices=["base", "val", "novel"])
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate a matrix of configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained")
    p.add_argument("--cells", help="e.g. 'stack=0; variant=sym; variant=sym,rep=off'")
    p.add_argument("--seeds", help="comma-separated seeds")
    p = sub.add_parser("heatmap", parents=[common], help="write six PGM activation maps for one pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query", required=True)
    return parser


def _flag_overrides(args) -> dict:
    out = {}
    for name in ("seed", "variant", "heads", "stack", "embed"):
        value = getattr(args, name)
        if value is not None:
            out[name] = value
    if args.rep is not None:
        out["rep"] = args.rep == "on"
    if args.episodes is not None:
        out["eval_episodes"] = args.episodes
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _with_epochs(flat: dict, stage: str, epochs: int) -> dict:
    """Set a stage's epoch count, dropping decay milestones beyond it."""
    probe = TrainConfig.from_flat({k: v for k, v in flat.items() if not k.startswith(stage + ".")})
    decay = flat.get(f"{stage}.decay_epochs", getattr(probe, stage).decay_epochs)
    if isinstance(decay, str):
        decay = [int(p) for p in decay.replace(",", " ").split()]
    flat[f"{stage}.epochs"] = epochs
    flat[f"{stage}.decay_epochs"] = [d for d in decay if d <= epochs]
    return flat


def _echo(kind: str, payload: dict) -> None:
    print(f"{kind} " + json.dumps(payload, sort_keys=True), flush=True)


def _progress(record: dict) -> None:
    print(" ".join(f"{k}={v}" for k, v in record.items()), flush=True)


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> tuple[TrainConfig, dict, dict]:
    flat = read_config(args.config) if args.config else {}
    data_kw, ablate_kw, train_kw = split_config(flat)
    train_kw.update(_flag_overrides(args))
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        train_kw = _with_epochs(train_kw, "stage1" if args.command == "pretrain" else "stage2", epochs)
    config = TrainConfig.from_flat(train_kw)
    return config, data_kw, ablate_kw


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_image(path, size: int) -> np.ndarray:
    p = _require(path, "image")
    if p.suffix.lower() == ".hxt":
        return read_raw_tensor(p)
    return resize_bilinear(read_ppm(p), size)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, config, data_kw, ablate_kw) -> int:
    spec = synthetic_spec(data_kw, args.seed)
    _echo("data", {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()})
    root = generate_synthetic(spec, _out_dir(args, "data"))
    print(f"wrote synthetic dataset to {root}", flush=True)
    return 0


def cmd_pretrain(args, config, data_kw, ablate_kw) -> int:
    dataset = load_dataset(_require(args.data, "dataset"), config.image_size)
    ckpt = pretrain_backbone(config, dataset, _progress)
    path = _out_dir(args) / "pretrain.ckpt"
    save_checkpoint(path, ckpt)
    print(f"saved {path}", flush=True)
    return 0


def cmd_meta_train(args, config, data_kw, ablate_kw) -> int:
    dataset = load_dataset(_require(args.data, "dataset"), config.image_size)
    pretrained = load_checkpoint(_require(args.pretrained, "checkpoint")) if args.pretrained else None
    resume = load_checkpoint(_require(args.resume, "checkpoint")) if args.resume else None
    ckpt = meta_train(config, dataset, pretrained, resume=resume, logger=_progress)
    path = _out_dir(args) / "meta.ckpt"
    save_checkpoint(path, ckpt)
    print(f"saved {path}", flush=True)
    return 0


def _report_row(config: TrainConfig, report, seed: int) -> dict:
    return {"variant": config.variant, "heads": config.heads, "stack": config.stack, "embed": config.embed,
            "rep": "on" if config.rep else "off", "n_way": config.n_way, "k_shot": config.k_shot,
            "mean": report.mean, "ci": report.ci, "episodes": report.episodes, "seed": seed}


def cmd_eval(args, config, data_kw, ablate_kw) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    model = model_from_checkpoint(ckpt)
    trained = model.config
    dataset = load_dataset(_require(args.data, "dataset"), trained.image_size)
    episodes = args.episodes or trained.eval_episodes
    seed = config.seed if args.seed is not None else trained.seed
    report = evaluate(model, dataset.part(args.split), episodes, np.random.default_rng([seed, 41]),
                      trained.n_way, trained.k_shot, trained.query_per_class)
    print(f"accuracy {100 * report.mean:.2f}±{100 * report.ci:.2f} episodes={report.episodes}", flush=True)
    row = _report_row(trained, report, seed)
    if args.out:
        write_results_csv(_out_dir(args) / "results.csv", [row])
    else:
        write_results_csv(sys.stdout, [row])
    return 0


def cmd_ablate(args, config, data_kw, ablate_kw) -> int:
    cells_text = args.cells or ablate_kw.get("cells")
    if not cells_text:
        raise ConfigurationError("ablate needs --cells or ablate.cells")
    seeds_text = args.seeds or ablate_kw.get("seeds") or str(config.seed)
    seeds = [int(s) for s in seeds_text.replace(",", " ").split()]
    dataset = load_dataset(_require(args.data, "dataset"), config.image_size)
    pretrained = load_checkpoint(_require(args.pretrained, "checkpoint")) if args.pretrained else None
    rows = run_ablation(parse_cells(cells_text), config, dataset, pretrained, seeds, config.eval_episodes, _progress)
    write_results_csv(_out_dir(args) / "results.csv", rows)
    write_results_csv(sys.stdout, rows)
    return 0


def cmd_heatmap(args, config, data_kw, ablate_kw) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    model = model_from_checkpoint(ckpt)
    size = model.config.image_size
    maps = pair_features(model, _load_image(args.support, size), _load_image(args.query, size))
    for path in write_heatmaps(maps, _out_dir(args, "heatmaps")):
        print(f"wrote {path}", flush=True)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "heatmap": cmd_heatmap,
}


def _limit_threads():
    value = os.environ.get("HELIX_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"HELIX_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _limit_threads()
        config, data_kw, ablate_kw = _resolve_config(args)
        if args.command != "gen-data":
            _echo("config", config.to_flat())
        try:
            return COMMANDS[args.command](args, config, data_kw, ablate_kw)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except HelixError as exc:
        message = str(exc).replace("\n", " ")
        print(f"error category={exc.category} message={message}", file=sys.stderr, flush=True)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
