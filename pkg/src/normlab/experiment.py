"""Experiment harness: configuration, training with early stopping,
evaluation, checkpoints and metrics files.

A run trains one model per seed, evaluates train/validation splits at
fixed intervals (always in eval mode, so logged rows are reproducible
from checkpoints), keeps the checkpoint with the best validation
accuracy, and reports mean and sample standard deviation of test accuracy
over the seeds that finished. Diverged seeds are logged, excluded from
the aggregate, and do not stop the other seeds.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import nn
from . import tensor as T
from .tensor import Tensor

METRICS_HEADER = "run_id,seed,step,split,loss,accuracy,wall_time_s"


class ConfigError(ValueError):
    """Malformed experiment configuration."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class ExperimentConfig:
    task: str
    dataset: str | dict
    norm_variant: str = "all_gn"
    groups: int = 4
    eps: float = 1e-5
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5
    sgd_momentum: float = 0.0
    batch_size: int = 32
    max_updates: int = 20000
    eval_interval: int = 500
    patience: int = 10
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    target_train_accuracy: float | None = None
    # visual-reasoning model widths
    stem_width: int = 32
    block_width: int = 32
    num_blocks: int = 4
    classifier_width: int = 64
    fc_width: int = 64
    token_embed_dim: int = 32
    gru_hidden: int = 64
    # few-shot task and model widths
    ways: int = 5
    shots: int = 5
    queries_per_class: int = 5
    embed_stem_width: int = 16
    embed_block_width: int = 16
    embed_num_blocks: int = 2
    embed_head_width: int = 32
    embedding_dim: int = 32
    cond_dim: int = 32
    ten_hidden: int = 32
    eval_episodes: int = 100
    test_episodes: int = 200
    eval_batch_size: int = 256
    eval_max_samples: int = 4096

    def __post_init__(self):
        if self.task not in ("sqoop", "fewshot"):
            raise ConfigError(f"task must be sqoop or fewshot, got {self.task!r}")
        if self.norm_variant not in nn.VARIANTS:
            raise ConfigError(f"norm_variant must be one of {nn.VARIANTS}")
        if self.task == "fewshot" and self.norm_variant not in ("all_gn", "all_bn"):
            raise ConfigError("fewshot supports norm_variant all_gn or all_bn")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.groups < 1:
            raise ConfigError("groups must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.eval_max_samples < 1:
            raise ConfigError("eval_max_samples must be positive")
        if self.max_updates < 0:
            raise ConfigError("max_updates must be non-negative")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.target_train_accuracy is not None and not 0 < self.target_train_accuracy <= 1:
            raise ConfigError("target_train_accuracy must be in (0, 1]")
        widths = [self.stem_width, self.block_width, self.fc_width,
                  self.embed_stem_width, self.embed_block_width, self.embed_head_width]
        if any(w % self.groups for w in widths):
            raise ConfigError(f"groups={self.groups} must divide all normalized widths {widths}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = {"task", "dataset"} - set(raw)
    if missing:
        raise ConfigError(f"missing required config keys: {sorted(missing)}")
    return ExperimentConfig(**raw)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# dataset resolution and model construction
# --------------------------------------------------------------------------

def resolve_dataset(cfg: ExperimentConfig):
    """Return (kind, dataset) from a path or an inline generation config."""
    if isinstance(cfg.dataset, str):
        manifest_path = Path(cfg.dataset) / "manifest.json"
        if not manifest_path.exists():
            raise ConfigError(f"dataset path {cfg.dataset} has no manifest.json")
        with open(manifest_path) as fh:
            kind = json.load(fh).get("kind")
        if kind == "sqoop":
            ds = D.load_sqoop(cfg.dataset)
        elif kind == "fewshot":
            ds = D.load_fewshot(cfg.dataset)
        else:
            raise ConfigError(f"unknown dataset kind {kind!r} at {cfg.dataset}")
    else:
        spec = dict(cfg.dataset)
        kind = spec.pop("kind", None)
        if kind == "sqoop":
            ds = D.generate_sqoop(D.SqoopConfig(**spec))
        elif kind == "fewshot":
            ds = D.gen_fewshot_universe(D.FewshotConfig(**spec))
        else:
            raise ConfigError("inline dataset config needs kind: sqoop or fewshot")
    if kind != cfg.task:
        raise ConfigError(f"task {cfg.task!r} cannot run on a {kind!r} dataset")
    return kind, ds


def build_model(cfg: ExperimentConfig, build_info: dict, rng: np.random.Generator):
    if cfg.task == "sqoop":
        return nn.FilmNetwork(
            cfg.norm_variant, vocab=build_info["vocab"], rng=rng,
            in_channels=build_info.get("in_channels", 1),
            stem_width=cfg.stem_width, block_width=cfg.block_width,
            num_blocks=cfg.num_blocks, classifier_width=cfg.classifier_width,
            fc_width=cfg.fc_width, token_embed_dim=cfg.token_embed_dim,
            gru_hidden=cfg.gru_hidden, num_answers=2, groups=cfg.groups, eps=cfg.eps)
    embedder = nn.ConditionedEmbedder(
        cfg.norm_variant, rng, in_channels=build_info.get("in_channels", 1),
        stem_width=cfg.embed_stem_width, block_width=cfg.embed_block_width,
        num_blocks=cfg.embed_num_blocks, head_width=cfg.embed_head_width,
        embed_dim=cfg.embedding_dim, cond_dim=cfg.cond_dim,
        groups=cfg.groups, eps=cfg.eps)
    return nn.ProtoHead(embedder, ten_hidden=cfg.ten_hidden, rng=rng)


def build_info_for(cfg: ExperimentConfig, dataset) -> dict:
    if cfg.task == "sqoop":
        return {"vocab": dataset.config.alphabet + len(D.RELATIONS),
                "in_channels": dataset.config.image_channels,
                "alphabet": dataset.config.alphabet}
    return {"in_channels": 1}


def make_optimizer(cfg: ExperimentConfig, model):
    params = list(model.named_parameters())
    if cfg.optimizer == "adam":
        return nn.Adam(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                       beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return nn.SGD(params, lr=cfg.learning_rate, momentum=cfg.sgd_momentum)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(out_dir: str | Path, model, cfg: ExperimentConfig,
                    build_info: dict, step: int, seed: int | None = None) -> Path:
    out = Path(out_dir)
    (out / "params").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, p in model.named_parameters():
        fname = f"params/{name}.bin"
        (out / fname).write_bytes(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        entries[name] = {"shape": list(p.data.shape), "file": fname}
    buffers = {}
    for name, (_, _, arr) in model.named_extra_state():
        fname = f"params/{name}.bin"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buffers[name] = {"shape": list(np.asarray(arr).shape), "file": fname}
    manifest = {
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "build": build_info,
        "step": step,
        "seed": seed,
        "params": entries,
        "buffers": buffers,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _read_blob(path: Path, shape) -> np.ndarray:
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    want = int(np.prod(shape)) if shape else 1
    if arr.size != want:
        raise CheckpointError(f"{path}: expected {want} values, found {arr.size}")
    return arr.reshape(shape)


def load_checkpoint(ckpt_dir: str | Path):
    """Rebuild the model from a checkpoint directory; returns (model, cfg, manifest)."""
    src = Path(ckpt_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"{src} has no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    cfg = config_from_dict(manifest["config"])
    model = build_model(cfg, manifest["build"], np.random.default_rng(0))
    params = dict(model.named_parameters())
    if set(params) != set(manifest["params"]):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    for name, entry in manifest["params"].items():
        arr = _read_blob(src / entry["file"], entry["shape"])
        if tuple(arr.shape) != params[name].data.shape:
            raise CheckpointError(f"{name}: shape {list(arr.shape)} does not match model")
        params[name].data = np.ascontiguousarray(arr)
    state = dict(model.named_extra_state())
    for name, entry in manifest["buffers"].items():
        if name not in state:
            raise CheckpointError(f"checkpoint buffer {name} has no home in the model")
    # group buffer values by owning module and hand them over together
    by_module: dict[int, tuple[object, dict]] = {}
    for name, (mod, key, _) in state.items():
        if name in manifest["buffers"]:
            arr = _read_blob(src / manifest["buffers"][name]["file"],
                             manifest["buffers"][name]["shape"])
            by_module.setdefault(id(mod), (mod, {}))[1][key] = arr
    for mod, values in by_module.values():
        mod.load_extra_state(values)
    return model, cfg, manifest


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _eval_indices(n: int, cap: int) -> np.ndarray:
    """Deterministic evaluation subset, shared by training-loop logging and
    checkpoint evaluation so the two always agree."""
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng([7, n, cap]).choice(n, cap, replace=False))


def _sqoop_eval(model, split: D.SqoopSplit, alphabet: int, batch: int,
                cap: int) -> tuple[float, float]:
    model.eval()
    idx = _eval_indices(len(split), cap)
    images = split.images[idx]
    answers = split.answers[idx]
    tokens = D.question_tokens(split.questions[idx], alphabet)
    n = len(idx)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        logits = model(Tensor(images[start:stop]), tokens[start:stop])
        loss = nn.softmax_xent(logits, answers[start:stop])
        total_loss += loss.item() * (stop - start)
        correct += int((np.argmax(logits.data, axis=1) == answers[start:stop]).sum())
    model.train()
    return total_loss / n, correct / n


def _episode_eval(model, episodes: list[D.Episode], ways: int) -> tuple[float, float]:
    model.eval()
    losses, accs = [], []
    for ep in episodes:
        logits = model.prototype_logits(Tensor(ep.support_x), ep.support_y,
                                        Tensor(ep.query_x), ways)
        losses.append(nn.softmax_xent(logits, ep.query_y).item())
        accs.append(nn.accuracy(logits.data, ep.query_y))
    model.train()
    return float(np.mean(losses)), float(np.mean(accs))


def _episode_bank(pool: D.FewshotPool, split: str, cfg: ExperimentConfig,
                  count: int, stream: int) -> list[D.Episode]:
    rng = np.random.default_rng([pool.config.seed, stream])
    ep_cfg = D.EpisodeConfig(ways=cfg.ways, shots=cfg.shots,
                             queries_per_class=cfg.queries_per_class)
    return [D.sample_episode(pool, split, ep_cfg, rng) for _ in range(count)]


def evaluate_split(model, cfg: ExperimentConfig, dataset, split: str,
                   banks: dict | None = None) -> tuple[float, float]:
    """Eval-mode loss and accuracy of one split (episode banks for fewshot)."""
    if cfg.task == "sqoop":
        return _sqoop_eval(model, dataset.splits[split], dataset.config.alphabet,
                           cfg.eval_batch_size, cfg.eval_max_samples)
    if banks is None:
        banks = {split: _episode_bank(dataset, split,
                                      cfg, cfg.eval_episodes, _BANK_STREAMS[split])}
    return _episode_eval(model, banks[split], cfg.ways)


_BANK_STREAMS = {"train": 100, "validation": 101, "test": 202}


def evaluate_checkpoint(ckpt_dir: str | Path, split: str,
                        data_dir: str | Path | None = None) -> dict:
    """Load a checkpoint and evaluate one dataset split in eval mode."""
    model, cfg, manifest = load_checkpoint(ckpt_dir)
    if data_dir is not None:
        cfg = config_from_dict({**asdict(cfg), "dataset": str(data_dir)})
    _, dataset = resolve_dataset(cfg)
    loss, acc = evaluate_split(model, cfg, dataset, split)
    return {"run_id": config_hash(cfg), "seed": manifest.get("seed"),
            "step": manifest["step"], "split": split, "loss": loss, "accuracy": acc}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV with the declared header; one file per seed."""

    def __init__(self, path: Path, run_id: str, seed: int, clock):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self._clock = clock
        self._t0 = clock()
        self.rows: list[dict] = []
        with open(path, "w") as fh:
            fh.write(METRICS_HEADER + "\n")

    def write(self, step: int, split: str, loss: float, accuracy: float):
        wall = self._clock() - self._t0
        with open(self.path, "a") as fh:
            fh.write(f"{self.run_id},{self.seed},{step},{split},"
                     f"{loss:.10g},{accuracy:.8f},{wall:.3f}\n")
        self.rows.append({"step": step, "split": split, "loss": loss,
                          "accuracy": accuracy, "wall_time_s": wall})


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

class _BatchStream:
    """Epoch-shuffled minibatch index stream, deterministic per seed."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self._queue: list[int] = []

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch:
            self._queue.extend(self.rng.permutation(self.n).tolist())
        out = self._queue[:self.batch]
        self._queue = self._queue[self.batch:]
        return np.asarray(out)


@dataclass
class SeedResult:
    seed: int
    failed: bool
    message: str
    steps_run: int
    best_step: int
    best_val_accuracy: float
    test_loss: float | None
    test_accuracy: float | None


def _has_batch_layers(model) -> bool:
    return any(d["domain"] == "batch" for d in nn.describe_norm_layers(model))


def _prime_running_stats(model, forward_once):
    """One train-mode forward so eval-mode batch layers are usable at step 0."""
    if _has_batch_layers(model):
        forward_once()


def _train_one_seed(cfg: ExperimentConfig, dataset, build_info: dict, seed: int,
                    out: Path, clock, banks: dict | None) -> SeedResult:
    run_id = config_hash(cfg)
    metrics = MetricsWriter(out / f"metrics_seed{seed}.csv", run_id, seed, clock)
    model = build_model(cfg, build_info, np.random.default_rng([seed, 0]))
    opt = make_optimizer(cfg, model)
    best_dir = out / f"best_seed{seed}"

    if cfg.task == "sqoop":
        split = dataset.splits["train"]
        tokens = D.question_tokens(split.questions, dataset.config.alphabet)
        stream = _BatchStream(len(split), cfg.batch_size, np.random.default_rng([seed, 1]))

        def train_step():
            idx = stream.next()
            logits = model(Tensor(split.images[idx]), tokens[idx])
            return nn.softmax_xent(logits, split.answers[idx])
    else:
        ep_cfg = D.EpisodeConfig(ways=cfg.ways, shots=cfg.shots,
                                 queries_per_class=cfg.queries_per_class)
        ep_rng = np.random.default_rng([seed, 1])

        def train_step():
            ep = D.sample_episode(dataset, "train", ep_cfg, ep_rng)
            logits = model.prototype_logits(Tensor(ep.support_x), ep.support_y,
                                            Tensor(ep.query_x), cfg.ways)
            return nn.softmax_xent(logits, ep.query_y)

    best_acc = -1.0
    best_step = -1
    bad_evals = 0

    def run_eval(step: int) -> tuple[float, bool]:
        nonlocal best_acc, best_step, bad_evals
        tr_loss, tr_acc = evaluate_split(model, cfg, dataset, "train", banks)
        va_loss, va_acc = evaluate_split(model, cfg, dataset, "validation", banks)
        metrics.write(step, "train", tr_loss, tr_acc)
        metrics.write(step, "validation", va_loss, va_acc)
        if va_acc > best_acc:
            best_acc = va_acc
            best_step = step
            bad_evals = 0
            save_checkpoint(best_dir, model, cfg, build_info, step, seed)
        else:
            bad_evals += 1
        stop = bad_evals >= cfg.patience
        if cfg.target_train_accuracy is not None and tr_acc >= cfg.target_train_accuracy:
            stop = True
        return tr_acc, stop

    step = 0
    try:
        _prime_running_stats(model, train_step)
        run_eval(0)
        while step < cfg.max_updates:
            step += 1
            opt.zero_grad()
            loss = train_step()
            if not np.isfinite(loss.item()):
                raise T.NumericsError("training loss is not finite")
            T.backward(loss)
            opt.step()
            if step % cfg.eval_interval == 0 or step == cfg.max_updates:
                _, stop = run_eval(step)
                if stop:
                    break
    except T.NumericsError as err:
        return SeedResult(seed, True, f"diverged: {err}", step,
                          best_step, best_acc, None, None)

    best_model, _, _ = load_checkpoint(best_dir)
    te_loss, te_acc = evaluate_split(best_model, cfg, dataset, "test", banks)
    metrics.write(best_step, "test", te_loss, te_acc)
    return SeedResult(seed, False, "ok", step, best_step, best_acc, te_loss, te_acc)


def train(cfg: ExperimentConfig, out_dir: str | Path, clock=None,
          emit_plotdata: bool = False) -> dict:
    """Train every seed, aggregate test accuracy, write summary and metrics."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clock = clock or time.perf_counter
    _, dataset = resolve_dataset(cfg)
    build_info = build_info_for(cfg, dataset)

    banks = None
    if cfg.task == "fewshot":
        banks = {
            "train": _episode_bank(dataset, "train", cfg, cfg.eval_episodes, 100),
            "validation": _episode_bank(dataset, "validation", cfg, cfg.eval_episodes, 101),
            "test": _episode_bank(dataset, "test", cfg, cfg.test_episodes, 202),
        }

    max_workers = int(os.environ.get("NORMLAB_THREADS", "1") or "1")
    max_workers = max(1, min(max_workers, len(cfg.seeds)))
    if max_workers == 1:
        results = [_train_one_seed(cfg, dataset, build_info, s, out, clock, banks)
                   for s in cfg.seeds]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(_train_one_seed, cfg, dataset, build_info, s,
                                   out, clock, banks)
                       for s in cfg.seeds]
            results = [f.result() for f in futures]

    used = [r for r in results if not r.failed]
    accs = [r.test_accuracy for r in used]
    summary = {
        "run_id": config_hash(cfg),
        "config": asdict(cfg),
        "n_seeds": len(cfg.seeds),
        "n_used": len(used),
        "failed_seeds": [{"seed": r.seed, "message": r.message}
                         for r in results if r.failed],
        "test_accuracy_mean": float(np.mean(accs)) if accs else None,
        "test_accuracy_std": (float(np.std(accs, ddof=1)) if len(accs) > 1
                              else (0.0 if accs else None)),
        "per_seed": [asdict(r) for r in results],
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if emit_plotdata:
        _write_plotdata(out, cfg.seeds)
    return summary


def _write_plotdata(out: Path, seeds) -> None:
    """Long-form accuracy curves gathered from the per-seed metrics files."""
    with open(out / "curves.csv", "w") as dst:
        dst.write("split,seed,step,accuracy\n")
        for seed in seeds:
            path = out / f"metrics_seed{seed}.csv"
            if not path.exists():
                continue
            with open(path) as src:
                next(src)
                for line in src:
                    _, s, step, split, _, acc, _ = line.rstrip("\n").split(",")
                    dst.write(f"{split},{s},{step},{acc}\n")
