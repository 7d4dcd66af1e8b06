"""Training/evaluation harness: flat-text configuration, episodic training
loop, evaluation with binomial confidence intervals, binary checkpoints and
append-only CSV metrics.

Config files are UTF-8 ``key = value`` lines with ``#`` comments and dotted
keys (``backbone.kind = unet``); they round-trip losslessly. Checkpoints
capture parameters, optimizer state, step counter, sampler RNG state and a
config echo, so a loaded checkpoint reproduces the uninterrupted run bit
for bit. The metrics ``seconds`` column records wallclock by default;
``clock = fixed`` writes 0.0 so two seeded runs produce byte-identical
files.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Adam, SGD
from .backbones import BackboneConfig, build_backbone
from .container import load_records, save_records
from .errors import ConfigError, ContractError, NonFiniteError
from .fewshot_graph import Episode, FewshotClassifier, GnnClassifier, episode_loss
from .omniglot import EpisodeSpec, ingest, sample_episode, split_classes

OMNIGLOT_ROOT_ENV = "OMNIGLOT_ROOT"
INIT_SCHEME = "he-normal+fan-in-uniform"

METRICS_HEADER = "step,split,loss,accuracy,ci95,seconds"
CHECKPOINT_NAME = "checkpoint.fsl"
METRICS_NAME = "metrics.csv"


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    gnn_hidden: int = 48
    gnn_rounds: int = 2
    n_way: int = 5
    k_shot: int = 1
    queries: int = 1
    episodes_per_step: int = 10
    total_steps: int = 3000
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    eval_interval: int = 200
    eval_episodes: int = 200
    data_root: str = ""
    data_n_train: int = 1200
    data_augment_train: bool = True
    data_augment_test: bool = False
    data_cache: str = ""
    out_dir: str = "runs/default"
    clock: str = "real"
    init_scheme: str = INIT_SCHEME

    def validate(self):
        self.backbone.validate()
        positive = {
            "gnn.hidden": self.gnn_hidden, "gnn.rounds": self.gnn_rounds,
            "n_way": self.n_way, "k_shot": self.k_shot, "queries": self.queries,
            "episodes_per_step": self.episodes_per_step,
            "eval_interval": self.eval_interval, "eval_episodes": self.eval_episodes,
            "data.n_train_classes": self.data_n_train,
        }
        for key, value in positive.items():
            if value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}")
        if self.n_way < 2:
            raise ConfigError(f"n_way must be >= 2, got {self.n_way}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.clock not in ("real", "fixed"):
            raise ConfigError(f"clock must be real or fixed, got {self.clock!r}")
        if self.init_scheme != INIT_SCHEME:
            raise ConfigError(f"unsupported init scheme {self.init_scheme!r}")
        return self


def _bool_to_text(value):
    return "true" if value else "false"


def _text_to_bool(text, key):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ConfigError(f"{key}: expected true/false, got {text!r}")


# key -> (attribute path, type tag)
_SCHEMA = {
    "backbone.kind": ("backbone.kind", str),
    "backbone.width": ("backbone.width", int),
    "backbone.aa_depth": ("backbone.aa_depth", int),
    "backbone.attn_heads": ("backbone.attn_heads", int),
    "backbone.attn_d_k": ("backbone.attn_d_k", int),
    "backbone.attn_d_v": ("backbone.attn_d_v", int),
    "backbone.sr_ratio": ("backbone.sr_ratio", float),
    "backbone.expand_split": ("backbone.expand_split", float),
    "backbone.t_steps": ("backbone.t_steps", int),
    "gnn.hidden": ("gnn_hidden", int),
    "gnn.rounds": ("gnn_rounds", int),
    "n_way": ("n_way", int),
    "k_shot": ("k_shot", int),
    "queries": ("queries", int),
    "episodes_per_step": ("episodes_per_step", int),
    "total_steps": ("total_steps", int),
    "optimizer": ("optimizer", str),
    "lr": ("lr", float),
    "seed": ("seed", int),
    "eval_interval": ("eval_interval", int),
    "eval_episodes": ("eval_episodes", int),
    "data.root": ("data_root", str),
    "data.n_train_classes": ("data_n_train", int),
    "data.augment_train": ("data_augment_train", bool),
    "data.augment_test": ("data_augment_test", bool),
    "data.cache": ("data_cache", str),
    "out": ("out_dir", str),
    "clock": ("clock", str),
    "init": ("init_scheme", str),
}


def _get_path(cfg, path):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _set_path(cfg, path, value):
    parts = path.split(".")
    obj = cfg
    for part in parts[:-1]:
        obj = getattr(obj, part)
    setattr(obj, parts[-1], value)


def serialize_config(cfg):
    """Canonical flat text form (sorted keys, '#' comments allowed)."""
    lines = ["# fewshot-lab training configuration"]
    for key in sorted(_SCHEMA):
        path, kind = _SCHEMA[key]
        value = _get_path(cfg, path)
        if kind is bool:
            text = _bool_to_text(value)
        elif kind is float:
            text = repr(float(value))
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_config(text):
    """Parse flat ``key = value`` text into a TrainConfig."""
    cfg = TrainConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        path, kind = _SCHEMA[key]
        try:
            if kind is bool:
                parsed = _text_to_bool(value, key)
            elif kind is int:
                parsed = int(value)
            elif kind is float:
                parsed = float(value)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {value!r} as {kind.__name__}") from None
        _set_path(cfg, path, parsed)
    return cfg


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsRow:
    step: int
    split: str
    loss: float
    accuracy: float
    ci95: float
    seconds: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy {self.accuracy} outside [0,1]")
        if self.ci95 < 0.0:
            raise ContractError(f"ci95 {self.ci95} negative")

    def to_csv(self):
        return (f"{self.step},{self.split},{self.loss!r},"
                f"{self.accuracy!r},{self.ci95!r},{self.seconds!r}")


def read_metrics(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ContractError(f"{path}: missing metrics header")
    rows = []
    for line in lines[1:]:
        step, split, loss, acc, ci, secs = line.split(",")
        rows.append(MetricsRow(int(step), split, float(loss), float(acc),
                               float(ci), float(secs)))
    return rows


class MetricsWriter:
    """Append-only, header-first CSV writer (one flushed line per row)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_text(METRICS_HEADER + "\n", encoding="utf-8")

    def append(self, row):
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(row.to_csv() + "\n")


def binomial_ci95(accuracy, n):
    return 1.96 * float(np.sqrt(accuracy * (1.0 - accuracy) / n)) if n else 0.0


# ---------------------------------------------------------------------------
# model assembly

def build_model(cfg):
    """Backbone + graph classifier, initialized from the config seed."""
    init_rng = np.random.default_rng([cfg.seed, 0])
    backbone = build_backbone(cfg.backbone, init_rng, name="backbone")
    gnn = GnnClassifier("gnn", init_rng, embed_dim=64,
                        hidden=cfg.gnn_hidden, rounds=cfg.gnn_rounds)
    return FewshotClassifier(backbone, gnn)


def build_optimizer(cfg, model):
    params = model.parameters()
    if cfg.optimizer == "adam":
        return Adam(params, lr=cfg.lr)
    return SGD(params, lr=cfg.lr)


def _sampler_rng(cfg):
    return np.random.default_rng([cfg.seed, 1])


def _eval_rng(seed, step):
    return np.random.default_rng([seed, 2, step])


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path, cfg, model, optimizer, step, sampler_rng):
    records = {
        "meta/config": serialize_config(cfg).encode("utf-8"),
        "meta/step": np.array([float(step)]),
        "meta/rng": json.dumps(sampler_rng.bit_generator.state).encode("utf-8"),
        "optim/kind": cfg.optimizer.encode("utf-8"),
    }
    for name, param in model.named_parameters().items():
        records[f"param/{name}"] = param.data
    for name, buf in model.buffers().items():
        records[f"buffer/{name}"] = buf
    for key, arr in optimizer.state_arrays().items():
        records[f"optim/{key}"] = arr
    save_records(path, records)


def load_checkpoint(path):
    """Rebuild (cfg, model, optimizer, step, sampler_rng) from a container."""
    records = load_records(path)
    cfg = parse_config(records["meta/config"].decode("utf-8")).validate()
    model = build_model(cfg)

    named = model.named_parameters()
    stored = {k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")}
    if set(named) != set(stored):
        missing = sorted(set(named) - set(stored))
        extra = sorted(set(stored) - set(named))
        raise ContractError(f"checkpoint parameter mismatch: missing {missing}, extra {extra}")
    for name, param in named.items():
        if stored[name].shape != param.data.shape:
            raise ContractError(
                f"checkpoint {name}: shape {stored[name].shape} != {param.data.shape}")
        param.data[...] = stored[name]

    buffers = model.buffers()
    for name, buf in buffers.items():
        key = f"buffer/{name}"
        if key not in records:
            raise ContractError(f"checkpoint missing buffer {name}")
        buf[...] = records[key]

    optimizer = build_optimizer(cfg, model)
    kind = records["optim/kind"].decode("utf-8")
    if kind != cfg.optimizer:
        raise ContractError(f"checkpoint optimizer {kind!r} != config {cfg.optimizer!r}")
    state = {k[len("optim/"):]: v for k, v in records.items()
             if k.startswith("optim/") and k != "optim/kind"}
    optimizer.load_state_arrays(state)

    step = int(records["meta/step"][0])
    sampler_rng = np.random.default_rng()
    sampler_rng.bit_generator.state = json.loads(records["meta/rng"].decode("utf-8"))
    return cfg, model, optimizer, step, sampler_rng


# ---------------------------------------------------------------------------
# dataset plumbing

def resolve_data_root(cfg_root, override=None):
    root = override or cfg_root or os.environ.get(OMNIGLOT_ROOT_ENV, "")
    if not root:
        raise ConfigError(
            f"no dataset root: set data.root, --root, or ${OMNIGLOT_ROOT_ENV}")
    return root


def load_split(cfg, root_override=None):
    root = resolve_data_root(cfg.data_root, root_override)
    dataset = ingest(root)
    split = split_classes(dataset, n_train=cfg.data_n_train,
                          augment_train=cfg.data_augment_train,
                          augment_test=cfg.data_augment_test)
    if cfg.data_cache:
        from .cache import CachedImageStore

        split.store = CachedImageStore(cfg.data_cache)
    return split


# ---------------------------------------------------------------------------
# evaluation

def evaluate_split(model, pool, store, spec, episodes, rng):
    """Accuracy/loss over freshly sampled episodes (restores train mode)."""
    spec.validate()
    if episodes < 1:
        raise ContractError(f"episodes must be >= 1, got {episodes}")
    was_training = model.training
    model.eval()
    correct = total = 0
    loss_sum = 0.0
    try:
        with ag.no_grad():
            for _ in range(episodes):
                episode = sample_episode(pool, store, spec, rng)
                logits = model(episode)
                loss_sum += episode_loss(logits, episode.query_labels).item()
                pred = logits.data.argmax(axis=1)
                correct += int((pred == episode.query_labels).sum())
                total += episode.n_query
    finally:
        if was_training:
            model.train()
    accuracy = correct / total
    return {
        "loss": loss_sum / episodes,
        "accuracy": accuracy,
        "ci95": binomial_ci95(accuracy, total),
        "correct": correct,
        "total": total,
    }


def evaluate_checkpoint(ckpt_path, n_way, k_shot, episodes, seed=0,
                        queries=1, split="test", root_override=None):
    """Load a checkpoint and score it on fresh episodes from a split."""
    cfg, model, _, step, _ = load_checkpoint(ckpt_path)
    data = load_split(cfg, root_override)
    spec = EpisodeSpec(n_way=n_way, k_shot=k_shot, queries=queries, split=split)
    stats = evaluate_split(model, data.pool(split), data.store, spec,
                           episodes, _eval_rng(seed, step))
    return MetricsRow(step=step, split=split, loss=stats["loss"],
                      accuracy=stats["accuracy"], ci95=stats["ci95"], seconds=0.0)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    final_step: int
    figure_paths: list


def train(cfg, resume=None, root_override=None, figures=True, log=None):
    """Run the episodic training loop described by ``cfg``.

    Per step: sample ``episodes_per_step`` training episodes, average their
    losses, backprop, optimizer step. Every ``eval_interval`` steps a train
    row (windowed averages) and a test row (fresh held-out episodes) are
    appended to the metrics CSV and the rolling checkpoint is written.
    ``resume`` continues a checkpoint bit-exactly; its config must match
    everywhere except ``total_steps``.
    """
    cfg.validate()
    data = load_split(cfg, root_override)
    train_pool, test_pool = data.pool("train"), data.pool("test")
    train_spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.queries, "train").validate()
    eval_spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.queries, "test").validate()
    if cfg.n_way > len({c.base_id for c in test_pool}):
        raise ContractError(
            f"{cfg.n_way}-way evaluation impossible with {len(test_pool)} test classes")

    if resume is not None:
        saved_cfg, model, optimizer, start_step, sampler_rng = load_checkpoint(resume)
        # run placement (output dir, dataset path) may move between sessions
        neutral = dict(total_steps=cfg.total_steps, out_dir=cfg.out_dir,
                       data_root=cfg.data_root, data_cache=cfg.data_cache)
        if replace(saved_cfg, **neutral) != cfg:
            raise ConfigError("resume config differs from checkpoint (beyond total_steps/paths)")
        if start_step > cfg.total_steps:
            raise ConfigError(
                f"checkpoint is at step {start_step}, beyond total_steps {cfg.total_steps}")
    else:
        model = build_model(cfg)
        optimizer = build_optimizer(cfg, model)
        start_step = 0
        sampler_rng = _sampler_rng(cfg)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    writer = MetricsWriter(out_dir / METRICS_NAME)

    t0 = time.perf_counter()

    def now():
        return time.perf_counter() - t0 if cfg.clock == "real" else 0.0

    model.train()
    window_losses = []
    window_correct = 0
    window_total = 0

    for step in range(start_step + 1, cfg.total_steps + 1):
        episodes = [sample_episode(train_pool, data.store, train_spec, sampler_rng)
                    for _ in range(cfg.episodes_per_step)]
        try:
            if cfg.queries == 1:
                logits, qlabels = model.forward_many(episodes)
            else:
                parts = [model(ep) for ep in episodes]
                logits = ag.concat(parts, axis=0)
                qlabels = np.concatenate([ep.query_labels for ep in episodes])
            loss = ag.cross_entropy(logits, qlabels)
            ag.backward(loss)
        except NonFiniteError as err:
            raise NonFiniteError(err.op, f"at training step {step}") from err
        optimizer.step()
        optimizer.zero_grad()
        pred = logits.data.argmax(axis=1)
        window_correct += int((pred == qlabels).sum())
        window_total += qlabels.shape[0]
        window_losses.append(loss.item())

        if step % cfg.eval_interval == 0:
            acc = window_correct / window_total
            writer.append(MetricsRow(
                step=step, split="train",
                loss=float(np.mean(window_losses)), accuracy=acc,
                ci95=binomial_ci95(acc, window_total), seconds=now()))
            stats = evaluate_split(model, test_pool, data.store, eval_spec,
                                   cfg.eval_episodes, _eval_rng(cfg.seed, step))
            writer.append(MetricsRow(
                step=step, split="test", loss=stats["loss"],
                accuracy=stats["accuracy"], ci95=stats["ci95"], seconds=now()))
            save_checkpoint(ckpt_path, cfg, model, optimizer, step, sampler_rng)
            window_losses = []
            window_correct = window_total = 0
            if log:
                log(f"step {step}: train acc {acc:.3f}, test acc {stats['accuracy']:.3f}")

    save_checkpoint(ckpt_path, cfg, model, optimizer, cfg.total_steps, sampler_rng)

    figure_paths = []
    if figures:
        from .report import render_metrics_figures

        figure_paths = render_metrics_figures(writer.path, out_dir)
    return TrainResult(checkpoint_path=str(ckpt_path), metrics_path=str(writer.path),
                       final_step=cfg.total_steps, figure_paths=figure_paths)
