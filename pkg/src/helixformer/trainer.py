"""Two-stage training, episodic evaluation, checkpoints and ablation runs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSplit, Episode, channel_stats, normalize, prototype_support, sample_episode
from .errors import ConfigurationError, FormatError, TrainingError
from .helix import HelixStack, VariantKind
from .model import Conv4Backbone, RelationHead
from .nn import Linear, Module
from .optim import SGD, Adam, OptimizerState, step_lr

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------
# configuration


@dataclass
class Stage1Config:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    decay_epochs: tuple[int, ...] = (85, 170)
    decay_factor: float = 0.1
    epochs: int = 200


@dataclass
class Stage2Config:
    lr: float = 1e-3
    backbone_momentum: float = 0.9
    backbone_weight_decay: float = 1e-3
    decay_epochs: tuple[int, ...] = (70, 110)
    decay_factor: float = 0.1
    epochs: int = 130
    episodes_per_epoch: int = 100


@dataclass
class TrainConfig:
    seed: int = 0
    n_way: int = 5
    k_shot: int = 1
    query_per_class: int = 15
    variant: str = "sym"
    heads: int = 2
    stack: int = 1
    embed: str = "conv"
    rep: bool = True
    channels: int = 64
    image_size: int = 84
    pool_blocks: tuple[int, ...] = (0, 1, 2, 3)
    dtype: str = "float64"
    val_every: int = 5
    val_episodes: int = 100
    eval_episodes: int = 2000
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        VariantKind.parse(self.variant)
        if self.embed not in ("conv", "fc"):
            raise ConfigurationError(f"embed must be conv or fc, got {self.embed!r}")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigurationError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.stack < 0:
            raise ConfigurationError("stack must be >= 0")
        if self.n_way < 2 or self.k_shot < 1 or self.query_per_class < 1:
            raise ConfigurationError("need n_way >= 2, k_shot >= 1, query_per_class >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for name, stage in (("stage1", self.stage1), ("stage2", self.stage2)):
            d = list(stage.decay_epochs)
            if any(b <= a for a, b in zip(d, d[1:])):
                raise ConfigurationError(f"{name}.decay_epochs must be strictly increasing: {d}")
            if d and d[-1] > stage.epochs:
                raise ConfigurationError(f"{name}.decay_epochs {d} exceed {name}.epochs={stage.epochs}")

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    out[f"{f.name}.{g.name}"] = _plain(getattr(value, g.name))
            else:
                out[f.name] = _plain(value)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        top = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict = {}
        nested: dict[str, dict] = {"stage1": {}, "stage2": {}}
        for key, raw in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise ConfigurationError(f"unknown config key {key!r}")
                sub = {f.name: f for f in dataclasses.fields(Stage1Config if head == "stage1" else Stage2Config)}
                if tail not in sub:
                    raise ConfigurationError(f"unknown config key {key!r}")
                nested[head][tail] = _coerce(raw, sub[tail].type, key)
            else:
                if head not in top or head in nested:
                    raise ConfigurationError(f"unknown config key {key!r}")
                kwargs[head] = _coerce(raw, top[head].type, key)
        kwargs["stage1"] = Stage1Config(**nested["stage1"])
        kwargs["stage2"] = Stage2Config(**nested["stage2"])
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        flat = self.to_flat()
        flat.update(changes)
        return TrainConfig.from_flat(flat)


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _coerce(raw, annotation, key):
    kind = str(annotation)
    try:
        if kind.startswith("tuple"):
            if isinstance(raw, str):
                parts = [p for p in raw.strip("[]() ").replace(",", " ").split() if p]
            else:
                parts = list(raw)
            return tuple(int(p) for p in parts)
        if kind == "bool":
            if isinstance(raw, str):
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return bool(raw)
        if kind == "int":
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value {raw!r} for {key}") from exc


# --------------------------------------------------------------------------
# the full model


class FewShotModel(Module):
    """Backbone, optional HelixFormer stack, and relation head."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        with T.default_dtype(config.dtype):
            rng = np.random.default_rng([config.seed, 11])
            self.backbone = Conv4Backbone(config.channels, rng, config.image_size, config.pool_blocks)
            self.helix = HelixStack(config.stack, config.channels, rng, variant=config.variant,
                                    heads=config.heads, embed=config.embed, rep=config.rep)
            self.head = RelationHead(config.channels, rng)
        self.norm_mean = np.zeros(3)
        self.norm_std = np.ones(3)

    def prepare(self, images: np.ndarray) -> T.Tensor:
        return T.Tensor(normalize(images, self.norm_mean, self.norm_std), dtype=self.config.dtype)

    def logits_from_features(self, support_feats: T.Tensor, query_feats: T.Tensor, n_way: int, k_shot: int,
                             trace: dict | None = None) -> T.Tensor:
        """``(N*K) x C x h x w`` support and ``M x C x h x w`` query maps -> ``M x N`` scores."""
        C, h, w = support_feats.shape[1:]
        protos = prototype_support(T.reshape(support_feats, (n_way, k_shot, C, h, w)))
        M = query_feats.shape[0]
        s_idx = np.tile(np.arange(n_way), M)
        q_idx = np.repeat(np.arange(M), n_way)
        f_S, f_Q = self.helix(protos, query_feats, s_idx, q_idx, trace)
        scores = self.head(T.concat_channels(f_S, f_Q))
        return T.reshape(scores, (M, n_way))

    def forward_episode(self, episode: Episode) -> T.Tensor:
        nk = len(episode.support)
        images = self.prepare(np.concatenate([episode.support, episode.query]))
        feats = self.backbone(images)
        support = T.take(feats, np.arange(nk))
        query = T.take(feats, np.arange(nk, feats.shape[0]))
        return self.logits_from_features(support, query, episode.n_way, episode.k_shot)

    def episode_logits(self, episode: Episode) -> np.ndarray:
        self.eval()
        with T.no_grad(), T.default_dtype(self.config.dtype):
            return self.forward_episode(episode).data


def param_checksum(module: Module) -> str:
    h = hashlib.sha256()
    for name, arr in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HXCK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    stage: str = "init"
    epoch: int = 0
    rng_state: dict | None = None
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    best: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_flat(self.config)


def _blob(name: str, arr: np.ndarray, offset: int) -> tuple[dict, bytes]:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<")
    data = arr.astype(dt, copy=False).tobytes()
    return {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}, data


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blobs: list[tuple[str, np.ndarray]] = [("norm/mean", ckpt.norm_mean), ("norm/std", ckpt.norm_std)]
    blobs += [("params/" + k, v) for k, v in sorted(ckpt.params.items())]
    blobs += [("best/" + k, v) for k, v in sorted(ckpt.best.items())]
    optim_meta = {}
    for oname, st in sorted(ckpt.optimizers.items()):
        optim_meta[oname] = st.hyperparams()
        blobs += [(f"optim/{oname}/{k}", v) for k, v in sorted(st.buffers.items())]
    index, chunks, offset = [], [], 0
    for name, arr in blobs:
        entry, data = _blob(name, np.asarray(arr), offset)
        index.append(entry)
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = {
        "blobs": index,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "meta": ckpt.meta,
        "optimizers": optim_meta,
        "payload_crc32": zlib.crc32(payload),
        "rng_state": ckpt.rng_state,
        "stage": ckpt.stage,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + payload


def decode_checkpoint(buf: bytes, where: str = "<bytes>") -> Checkpoint:
    if len(buf) < 16 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{where}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{where}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{where}: corrupt header") from exc
    payload = buf[16 + hlen:]
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise FormatError(f"{where}: payload checksum mismatch")
    arrays = {}
    for entry in header["blobs"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"{where}: truncated blob {entry['name']}")
        dt = np.dtype(entry["dtype"])
        arrays[entry["name"]] = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize, offset=start) \
            .reshape(entry["shape"]).astype(dt.newbyteorder("="))
    optimizers = {}
    for oname, hp in header["optimizers"].items():
        prefix = f"optim/{oname}/"
        buffers = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        optimizers[oname] = OptimizerState(kind=hp["kind"], lr=hp["lr"], momentum=hp["momentum"],
                                           weight_decay=hp["weight_decay"], betas=tuple(hp["betas"]),
                                           eps=hp["eps"], step=hp["step"], buffers=buffers)
    return Checkpoint(
        config=header["config"],
        params={k[7:]: v for k, v in arrays.items() if k.startswith("params/")},
        norm_mean=arrays["norm/mean"],
        norm_std=arrays["norm/std"],
        stage=header["stage"],
        epoch=header["epoch"],
        rng_state=header["rng_state"],
        optimizers=optimizers,
        best={k[5:]: v for k, v in arrays.items() if k.startswith("best/")},
        meta=header["meta"],
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, str(path))


def model_from_checkpoint(ckpt: Checkpoint, use_best: bool = True) -> FewShotModel:
    model = FewShotModel(ckpt.train_config())
    state = ckpt.best if use_best and ckpt.best else ckpt.params
    model.load_state_dict(state)
    model.norm_mean, model.norm_std = ckpt.norm_mean.copy(), ckpt.norm_std.copy()
    return model


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    episodes: int
    accuracies: np.ndarray
    mean: float
    ci: float

    @classmethod
    def from_accuracies(cls, accs: Sequence[float]) -> "EvalReport":
        accs = np.asarray(accs, dtype=np.float64)
        ci = 1.96 * accs.std() / math.sqrt(len(accs))
        return cls(len(accs), accs, float(accs.mean()), float(ci))

    def __str__(self) -> str:
        return f"{100 * self.mean:.2f}±{100 * self.ci:.2f}"


def evaluate(model, classes: dict[str, np.ndarray], episodes: int, rng: np.random.Generator,
             n_way: int = 5, k_shot: int = 1, query_per_class: int = 15) -> EvalReport:
    """Mean per-episode accuracy with a 95% interval.

    ``model`` only needs ``episode_logits(episode) -> (M, N) array``.
    """
    if episodes < 1:
        raise ConfigurationError("evaluation needs at least one episode")
    accs = []
    for _ in range(episodes):
        ep = sample_episode(classes, n_way, k_shot, query_per_class, rng)
        logits = np.asarray(model.episode_logits(ep))
        accs.append(float((logits.argmax(axis=1) == ep.query_labels).mean()))
    return EvalReport.from_accuracies(accs)


# --------------------------------------------------------------------------
# stage one: supervised pre-training of the backbone


class _PretrainNet(Module):
    def __init__(self, backbone: Conv4Backbone, n_classes: int, rng):
        super().__init__()
        self.backbone = backbone
        self.fc = Linear(backbone.channels, n_classes, rng)

    def forward(self, x):
        f = self.backbone(x)
        return self.fc(T.reduce_mean(f, axis=(2, 3)))


def _emit(logger, **record):
    if logger is not None:
        logger(record)
    log.info(" ".join(f"{k}={v}" for k, v in record.items()))


def pretrain_backbone(config: TrainConfig, dataset: DatasetSplit, logger: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train backbone + a temporary linear classifier on every base class; keep only the backbone."""
    with T.default_dtype(config.dtype):
        return _pretrain(config, dataset, logger)


def _pretrain(config, dataset, logger):
    if not dataset.base:
        raise TrainingError("base split is empty")
    cfg = config.stage1
    names = sorted(dataset.base)
    images = np.concatenate([dataset.base[n] for n in names])
    labels = np.concatenate([np.full(len(dataset.base[n]), i) for i, n in enumerate(names)])
    mean, std = channel_stats(dataset.base)
    model = FewShotModel(config)
    with T.default_dtype(config.dtype):
        net = _PretrainNet(model.backbone, len(names), np.random.default_rng([config.seed, 12]))
    opt = SGD(net.parameters(), cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([config.seed, 13])
    history = []
    net.train()
    for epoch in range(cfg.epochs):
        opt.lr = step_lr(cfg.lr, epoch, cfg.decay_epochs, cfg.decay_factor)
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = T.Tensor(normalize(images[idx], mean, std), dtype=config.dtype)
            loss = T.cross_entropy(net(x), labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingError(f"stage-1 loss diverged at epoch {epoch}")
            T.backward(loss)
            opt.step()
            losses.append(float(loss.data))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr, "steps": losses})
        _emit(logger, stage="pretrain", epoch=epoch, loss=f"{np.mean(losses):.4f}", lr=f"{opt.lr:g}")
    params = {k: v.copy() for k, v in model.backbone.state_dict().items()}
    return Checkpoint(
        config=config.to_flat(),
        params={"backbone." + k: v for k, v in params.items()},
        norm_mean=mean, norm_std=std, stage="pretrain", epoch=cfg.epochs,
        meta={"history": history, "base_classes": len(names)},
    )


# --------------------------------------------------------------------------
# stage two: episodic meta-training


def _split_params(model: FewShotModel):
    params = model.parameters()
    backbone = {k: v for k, v in params.items() if k.startswith("backbone.")}
    rest = {k: v for k, v in params.items() if not k.startswith("backbone.")}
    return backbone, rest


def _state_copy(model: Module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def episode_loss(model: FewShotModel, episode: Episode) -> T.Tensor:
    """Mean softmax cross-entropy of the query labels against relation scores."""
    return T.cross_entropy(model.forward_episode(episode), episode.query_labels)


def meta_train(config: TrainConfig, dataset: DatasetSplit, pretrained: Checkpoint | None = None,
               resume: Checkpoint | None = None, stop_after: int | None = None,
               logger: Callable[[dict], None] | None = None) -> Checkpoint:
    """Fine-tune backbone (SGD) and HelixFormer + head (Adam) on base-class episodes.

    ``resume`` continues a checkpoint written by an earlier call;
    ``stop_after`` ends the run after that many completed epochs.
    """
    with T.default_dtype(config.dtype):
        return _meta_train(config, dataset, pretrained, resume, stop_after, logger)


def _meta_train(config, dataset, pretrained, resume, stop_after, logger):
    cfg = config.stage2
    model = FewShotModel(config)
    if resume is not None:
        saved = resume.train_config()
        if saved.to_flat() != config.to_flat():
            raise ConfigurationError("resume checkpoint was written with a different configuration")
        model.load_state_dict(resume.params)
        mean, std = resume.norm_mean, resume.norm_std
    elif pretrained is not None:
        pcfg = pretrained.train_config()
        if (pcfg.channels, pcfg.image_size, tuple(pcfg.pool_blocks)) != (config.channels, config.image_size, tuple(config.pool_blocks)):
            raise ConfigurationError(
                f"pretrained backbone (C={pcfg.channels}, size={pcfg.image_size}, pools={pcfg.pool_blocks}) "
                f"does not match config (C={config.channels}, size={config.image_size}, pools={config.pool_blocks})")
        backbone_state = {k[len("backbone."):]: v for k, v in pretrained.params.items() if k.startswith("backbone.")}
        model.backbone.load_state_dict(backbone_state)
        mean, std = pretrained.norm_mean, pretrained.norm_std
    else:
        mean, std = channel_stats(dataset.base)
    model.norm_mean, model.norm_std = np.asarray(mean).copy(), np.asarray(std).copy()

    backbone_params, new_params = _split_params(model)
    sgd = SGD(backbone_params, cfg.lr, momentum=cfg.backbone_momentum, weight_decay=cfg.backbone_weight_decay)
    adam = Adam(new_params, cfg.lr)
    rng = np.random.default_rng([config.seed, 21])
    start_epoch, best, best_acc, history = 0, {}, -1.0, []
    if resume is not None:
        sgd.load_state(resume.optimizers["backbone"])
        adam.load_state(resume.optimizers["helix"])
        rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch
        best = {k: v.copy() for k, v in resume.best.items()}
        best_acc = resume.meta.get("best_val", -1.0)
        history = list(resume.meta.get("history", []))

    end_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        lr = step_lr(cfg.lr, epoch, cfg.decay_epochs, cfg.decay_factor)
        sgd.lr = adam.lr = lr
        model.train()
        losses = []
        for _ in range(cfg.episodes_per_epoch):
            ep = sample_episode(dataset.base, config.n_way, config.k_shot, config.query_per_class, rng)
            loss = episode_loss(model, ep)
            if not np.isfinite(loss.data):
                raise TrainingError(f"stage-2 loss diverged at epoch {epoch}")
            T.backward(loss)
            sgd.step()
            adam.step()
            losses.append(float(loss.data))
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        last = epoch == cfg.epochs - 1
        if config.val_every and dataset.val and ((epoch + 1) % config.val_every == 0 or last):
            report = evaluate(model, dataset.val, config.val_episodes, np.random.default_rng([config.seed, 31]),
                              config.n_way, config.k_shot, config.query_per_class)
            record["val_acc"] = report.mean
            if report.mean > best_acc:
                best_acc, best = report.mean, _state_copy(model)
        history.append(record)
        _emit(logger, stage="meta-train", epoch=epoch, loss=f"{record['loss']:.4f}", lr=f"{lr:g}",
              **({"val_acc": f"{record['val_acc']:.4f}"} if "val_acc" in record else {}))

    return Checkpoint(
        config=config.to_flat(), params=_state_copy(model), norm_mean=model.norm_mean, norm_std=model.norm_std,
        stage="meta-train", epoch=end_epoch, rng_state=rng.bit_generator.state,
        optimizers={"backbone": sgd.state, "helix": adam.state}, best=best,
        meta={"history": history, "best_val": best_acc},
    )


# --------------------------------------------------------------------------
# ablations

RESULT_COLUMNS = ("variant", "heads", "stack", "embed", "rep", "n_way", "k_shot", "mean", "ci", "episodes", "seed")


def run_ablation(cells: Iterable[dict], base: TrainConfig, dataset: DatasetSplit,
                 pretrained: dict[int, Checkpoint] | Checkpoint | None = None, seeds: Sequence[int] = (0,),
                 episodes: int | None = None, logger: Callable[[dict], None] | None = None) -> list[dict]:
    """Meta-train and evaluate every cell under every seed with shared data and seed streams.

    A cell is a dict of config overrides (``variant``, ``heads``, ``embed``,
    ``rep``, ``stack`` ...). ``pretrained`` maps seed -> stage-1 checkpoint; a
    missing entry is pre-trained on demand and reused across cells.
    """
    cells = list(cells)
    episodes = episodes or base.eval_episodes
    cache: dict[int, Checkpoint] = {}
    if isinstance(pretrained, Checkpoint):
        cache = {s: pretrained for s in seeds}
    elif pretrained:
        cache = dict(pretrained)
    rows = []
    for seed in seeds:
        seed_cfg = base.replace(seed=seed)
        if seed not in cache:
            cache[seed] = pretrain_backbone(seed_cfg, dataset, logger)
        for cell in cells:
            cfg = seed_cfg.replace(**cell)
            ckpt = meta_train(cfg, dataset, cache[seed], logger=logger)
            model = model_from_checkpoint(ckpt)
            report = evaluate(model, dataset.novel, episodes, np.random.default_rng([seed, 41]),
                              cfg.n_way, cfg.k_shot, cfg.query_per_class)
            row = {"variant": cfg.variant, "heads": cfg.heads, "stack": cfg.stack, "embed": cfg.embed,
                   "rep": "on" if cfg.rep else "off", "n_way": cfg.n_way, "k_shot": cfg.k_shot,
                   "mean": report.mean, "ci": report.ci, "episodes": report.episodes, "seed": seed,
                   "report": report}
            rows.append(row)
            _emit(logger, stage="ablate", **{k: row[k] for k in RESULT_COLUMNS})
    return rows


def write_results_csv(path_or_file, rows: Iterable[dict]) -> None:
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([f"{row[c]:.6f}" if c in ("mean", "ci") else row[c] for c in RESULT_COLUMNS])
    finally:
        if own:
            fh.close()


def results_csv_text(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    write_results_csv(buf, rows)
    return buf.getvalue()
