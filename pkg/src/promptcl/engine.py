"""Sequential training over a class-incremental stream.

A run owns one :class:`StreamRunner`: frozen backbone, optional query
encoder, prompts, heads, regularizer state and a single Adam instance with
``head`` and ``prompt`` learning-rate groups. After every task the runner
evaluates all seen tasks and fills one row of the accuracy matrices.

CKP1 checkpoint layout (little-endian)::

    b"CKP1"
    u32  manifest length in bytes
    ...  manifest, UTF-8 JSON with sorted keys
    ...  tensor blob in the PTW1 per-tensor layout with f64 data

The manifest carries the config hash, next task index, optimizer step
count, the generator state as u64 words and the partial run record.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import prompt_similarity
from .backbone import BackboneState, forward_features, query_feature, round_to_f32, save_backbone
from .data import Dataset, StreamSpec, epoch_order, to_float
from .errors import ConfigError, FormatError
from .fileio import atomic_write_bytes, pack_tensors, unpack_tensors
from .finetune import FinetuneConfig, finetune_backbone
from .methods import (LinearHead, NMCHead, PromptState, RegState, assemble_prompts, build_only_prompt, build_pool,
                      build_weighted, class_statistics, ewc_update_fisher, masked_cross_entropy, reg_penalty,
                      si_accumulate, si_begin_task, si_consolidate, tap_align, train_oracle_query)
from .optim import Adam, ParamGroup
from .tensor import Tape, Tensor

CKP1_MAGIC = b"CKP1"
STRATEGY_CHOICES = ("none", "only_prompt", "pool", "weighted")


@dataclass(frozen=True)
class MethodConfig:
    strategy: str = "only_prompt"
    n_params: int = 768
    pool_size: int = 10
    prompt_length: int = 1
    top_n: int = 3
    query: str = "default"  # default | oracle
    head: str = "linear"  # linear | nmc
    adapt: str = "all"  # all | first_task
    tap: bool = False

    def validate(self) -> None:
        if self.strategy not in STRATEGY_CHOICES:
            raise ConfigError(f"strategy must be one of {STRATEGY_CHOICES}, got {self.strategy!r}")
        if self.query not in ("default", "oracle"):
            raise ConfigError(f"query must be 'default' or 'oracle', got {self.query!r}")
        if self.head not in ("linear", "nmc"):
            raise ConfigError(f"head must be 'linear' or 'nmc', got {self.head!r}")
        if self.adapt not in ("all", "first_task"):
            raise ConfigError(f"adapt must be 'all' or 'first_task', got {self.adapt!r}")
        if self.n_params < 1 or self.pool_size < 1 or self.prompt_length < 1:
            raise ConfigError("prompt sizes must be positive")
        if self.strategy == "pool" and not 1 <= self.top_n <= self.pool_size:
            raise ConfigError("top_n must lie in [1, pool_size]")
        if self.tap and self.head != "linear":
            raise ConfigError("tap alignment needs the linear head")

    @property
    def label(self) -> str:
        if self.strategy == "none":
            parts = ["linear_probe" if self.head == "linear" else "nmc_probe"]
        else:
            parts = [self.strategy]
            if self.head == "nmc":
                parts.append("nmc")
        if self.adapt == "first_task" and self.strategy != "none":
            parts.append("first_task")
        if self.query == "oracle" and self.strategy in ("pool", "weighted"):
            parts.append("oracle")
        if self.tap:
            parts.append("tap")
        return "+".join(parts)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr_head: float = 1e-3
    lr_prompt: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    surrogate: float = 0.5
    reg_kind: str = "none"
    reg_strength: float = 0.0
    si_damping: float = 0.1
    seed: int = 0
    tap_samples: int = 64
    tap_epochs: int = 10
    oracle_epochs: int = 10
    oracle_lr: float = 1e-3
    eval_batch: int = 128

    @property
    def lam(self) -> float:
        return self.lr_prompt / self.lr_head

    def validate(self) -> None:
        if self.lr_head <= 0:
            raise ConfigError("lr_head must be positive")
        if self.lr_prompt < 0:
            raise ConfigError("lr_prompt must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.reg_kind not in ("none", "ewc", "si"):
            raise ConfigError(f"reg kind must be none, ewc or si, got {self.reg_kind!r}")
        if self.reg_strength < 0:
            raise ConfigError("reg strength must be non-negative")
        if self.tap_samples < 1 or self.tap_epochs < 0:
            raise ConfigError("tap_samples must be >= 1 and tap_epochs >= 0")


# -- run record --------------------------------------------------------------


@dataclass
class RunRecord:
    run_id: str
    method: str
    seed: int
    config: dict
    tasks: list[list[int]]
    test_sizes: list[int]
    acc: list[list[float | None]]
    acc_local: list[list[float | None]]
    p_sim_init: float | None
    p_sim: list[float | None]
    losses: list[list[float]]
    n_params_prompt: int
    n_params_keys: int
    n_params_head: int
    lam: float
    reg_kind: str
    lambda_reg: float
    complete: bool = True

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def global_acc(self, t: int) -> float:
        """Accuracy over the union of seen test sets after task ``t``."""
        row = self.acc[t]
        n = sum(self.test_sizes[s] for s in range(t + 1))
        return sum(row[s] * self.test_sizes[s] for s in range(t + 1)) / n

    @property
    def final_acc(self) -> float:
        return self.global_acc(self.n_tasks - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _digest(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def dataset_digest(dataset: Dataset) -> str:
    return _digest(dataset.images.tobytes(), dataset.labels.tobytes(), dataset.split.tobytes())


# -- runner ------------------------------------------------------------------


class StreamRunner:
    """Mutable state of one run; advance with :meth:`train_task`."""

    def __init__(self, dataset: Dataset, stream: StreamSpec, backbone: BackboneState,
                 method: MethodConfig = MethodConfig(), train: TrainConfig = TrainConfig()):
        method.validate()
        train.validate()
        if not backbone.frozen:
            raise ValueError("the adapted backbone must be frozen")
        self.dataset, self.stream, self.backbone = dataset, stream, backbone
        self.method, self.train = method, train
        d = backbone.config.embed_dim
        self.rng = np.random.default_rng(train.seed)

        self.query_state = None
        self.queries = None
        if method.strategy in ("pool", "weighted"):
            self.query_state = backbone
            if method.query == "oracle":
                every = np.concatenate(stream.train_idx)
                ft = FinetuneConfig(train.oracle_epochs, 32, train.oracle_lr, train.seed)
                self.query_state = train_oracle_query(dataset, every, backbone, ft)
            self.queries = self._query_features()

        lam = train.lam
        if method.strategy == "only_prompt":
            self.prompt: PromptState | None = build_only_prompt(method.n_params, d, self.rng, lam)
        elif method.strategy == "pool":
            self.prompt = build_pool(method.pool_size, method.prompt_length, d, method.top_n, self.rng, lam)
        elif method.strategy == "weighted":
            self.prompt = build_weighted(method.pool_size, method.prompt_length, d, self.rng, lam)
        else:
            self.prompt = None
        self.head = LinearHead(dataset.n_classes, d, self.rng)
        self.nmc = NMCHead(d) if method.head == "nmc" else None

        groups = []
        if method.head == "linear" or self.prompt is not None:
            groups.append(ParamGroup("head", train.lr_head, self.head.params()))
        if self.prompt is not None:
            groups.append(ParamGroup("prompt", train.lr_prompt, self.prompt.params()))
        masks = {}
        if self.prompt is not None and not self.prompt.mask.all():
            masks = self.prompt.masks()
        self.opt = Adam(groups, train.beta1, train.beta2, train.eps, masks)

        self.reg = RegState(train.reg_kind, train.reg_strength, train.si_damping)
        if self.reg.kind == "si":
            si_begin_task(self.reg, self.trainable())
        self.tap_stats: dict = {}

        n_t = stream.n_tasks
        self.t = 0
        self.acc: list[list[float | None]] = [[None] * n_t for _ in range(n_t)]
        self.acc_local: list[list[float | None]] = [[None] * n_t for _ in range(n_t)]
        self.losses: list[list[float]] = []
        self.p_sim_values: list[float | None] = []
        self.p_sim_init = self.prompt_similarity()

    # -- helpers --

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        if self.prompt is not None:
            out.update(self.prompt.params())
        if self.method.head == "linear" or self.prompt is not None:
            out.update(self.head.params())
        return out

    def _query_features(self) -> np.ndarray:
        idx = np.concatenate(list(self.stream.train_idx) + list(self.stream.test_idx))
        out = np.zeros((len(self.dataset), self.backbone.config.embed_dim))
        step = self.train.eval_batch
        for i in range(0, len(idx), step):
            sel = idx[i:i + step]
            out[sel] = query_feature(to_float(self.dataset.images[sel]), self.query_state)
        return out

    def _queries(self, sel: np.ndarray):
        return None if self.queries is None else self.queries[sel]

    def features(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Frozen-mode features and flattened inserted prompts for ``idx``."""
        feats, flats = [], []
        step = self.train.eval_batch
        with T.no_tape():
            for i in range(0, len(idx), step):
                sel = idx[i:i + step]
                asm = assemble_prompts(self.prompt, self._queries(sel), len(sel))
                feats.append(forward_features(to_float(self.dataset.images[sel]), asm.prompts, self.backbone).data)
                if asm.retrieved is not None:
                    flats.append(np.asarray(asm.retrieved))
        if not feats:
            return np.zeros((0, self.backbone.config.embed_dim)), None
        return np.concatenate(feats), (np.concatenate(flats) if flats else None)

    def prompt_similarity(self) -> float | None:
        if self.prompt is None:
            return None
        idx = np.concatenate(self.stream.test_idx)
        with T.no_tape():
            flat = assemble_prompts(self.prompt, self._queries(idx), len(idx)).retrieved
        return float(prompt_similarity(flat).value)

    def predict(self, feats: np.ndarray, classes) -> np.ndarray:
        if self.nmc is not None:
            return self.nmc.predict(feats, classes)
        return self.head.predict(feats, classes)

    # -- training --

    def _trains_prompt(self, t: int) -> bool:
        return self.prompt is not None and (self.method.adapt == "all" or t == 0)

    def _step(self, sel: np.ndarray, classes) -> float:
        cfg = self.train
        images, labels = to_float(self.dataset.images[sel]), self.dataset.labels[sel]
        params = self.trainable()
        with Tape() as tape:
            asm = assemble_prompts(self.prompt, self._queries(sel), len(sel))
            feats = forward_features(images, asm.prompts, self.backbone)
            ce = masked_cross_entropy(self.head.logits(feats), labels, classes)
            total = ce
            if asm.surrogate is not None and cfg.surrogate != 0.0:
                total = T.add(total, T.scale(asm.surrogate, cfg.surrogate))
            pen = reg_penalty(self.reg, params)
            if pen is not None:
                total = T.add(total, pen)
        self.opt.zero_grad()
        tape.backward(total)
        if self.reg.kind == "si":
            grads = {k: p.grad.copy() for k, p in params.items()}
            before = {k: p.data.copy() for k, p in params.items()}
            self.opt.step()
            si_accumulate(self.reg, grads, {k: params[k].data - before[k] for k in params})
        else:
            self.opt.step()
        return ce.item()

    def _log_probs(self, classes):
        def fn(i):
            sel = np.array([i])
            asm = assemble_prompts(self.prompt, self._queries(sel), 1)
            feats = forward_features(to_float(self.dataset.images[sel]), asm.prompts, self.backbone)
            logits = T.take(self.head.logits(feats), sorted(classes), axis=-1)
            return T.reshape(T.log_softmax_rows(logits), (len(classes),))
        return fn

    def train_task(self, t: int) -> None:
        if t != self.t:
            raise ValueError(f"expected task {self.t}, got {t}")
        cfg, stream = self.train, self.stream
        classes = stream.tasks[t]
        if self.method.adapt == "first_task" and t == 1 and self.prompt is not None:
            self.opt.group("prompt").lr = 0.0
        gradient_training = self.method.head == "linear" or self._trains_prompt(t)
        epoch_losses = []
        if gradient_training:
            for epoch in range(cfg.epochs):
                order = epoch_order(stream.train_idx[t], cfg.seed, t, epoch)
                total = 0.0
                for i in range(0, len(order), cfg.batch_size):
                    sel = order[i:i + cfg.batch_size]
                    total += self._step(sel, classes) * len(sel)
                epoch_losses.append(total / len(order))
        self.opt.zero_grad()
        self.losses.append(epoch_losses)

        if self.reg.kind == "ewc":
            ewc_update_fisher(self.reg, stream.train_idx[t], self._log_probs(classes), self.trainable())
        elif self.reg.kind == "si":
            si_consolidate(self.reg, self.trainable())

        if self.nmc is not None or self.method.tap:
            feats, _ = self.features(stream.train_idx[t])
            labels = self.dataset.labels[stream.train_idx[t]]
            if self.nmc is not None:
                self.nmc.fit(feats, labels)
            if self.method.tap:
                self.tap_stats.update(class_statistics(feats, labels))
                tap_align(self.head, self.tap_stats, stream.seen_classes(t), cfg.tap_samples, cfg.tap_epochs,
                          seed=cfg.seed * 1009 + t, lr=cfg.lr_head)
        self._evaluate(t)
        self.p_sim_values.append(self.prompt_similarity())
        self.t += 1

    def _evaluate(self, t: int) -> None:
        seen = self.stream.seen_classes(t)
        for s in range(t + 1):
            idx = self.stream.test_idx[s]
            feats, _ = self.features(idx)
            y = self.dataset.labels[idx]
            self.acc[t][s] = float(np.mean(self.predict(feats, seen) == y))
            self.acc_local[t][s] = float(np.mean(self.predict(feats, self.stream.tasks[s]) == y))

    # -- record and checkpoints --

    def config_snapshot(self) -> dict:
        return {
            "method": asdict(self.method),
            "train": asdict(self.train),
            "backbone": asdict(self.backbone.config),
            "stream": {"tasks": [list(x) for x in self.stream.tasks], "seed": self.stream.seed},
        }

    def config_hash(self) -> str:
        snap = json.dumps(self.config_snapshot(), sort_keys=True).encode()
        return _digest(snap, dataset_digest(self.dataset).encode(), self.backbone.fingerprint())

    def record(self) -> RunRecord:
        p = self.prompt
        h = self.config_hash()
        return RunRecord(
            run_id=f"{self.method.label}-s{self.train.seed}-{h[:10]}",
            method=self.method.label,
            seed=self.train.seed,
            config=self.config_snapshot(),
            tasks=[list(x) for x in self.stream.tasks],
            test_sizes=[len(x) for x in self.stream.test_idx],
            acc=[list(r) for r in self.acc],
            acc_local=[list(r) for r in self.acc_local],
            p_sim_init=self.p_sim_init,
            p_sim=list(self.p_sim_values),
            losses=[list(x) for x in self.losses],
            n_params_prompt=0 if p is None else p.n_prompt_params,
            n_params_keys=0 if p is None else p.n_key_params,
            n_params_head=self.head.weight.size + self.head.bias.size if self.method.head == "linear" else 0,
            lam=self.train.lam,
            reg_kind=self.train.reg_kind,
            lambda_reg=self.train.reg_strength,
            complete=self.t == self.stream.n_tasks,
        )

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays = {k: p.data for k, p in self.trainable().items()}
        arrays.update({k: p.data for k, p in self.head.params().items()})
        arrays.update(self.opt.state_arrays())
        arrays.update(self.reg.arrays())
        if self.nmc is not None:
            for c in sorted(self.nmc.sums):
                arrays[f"nmc.sum.{c}"] = self.nmc.sums[c]
        for c in sorted(self.tap_stats):
            arrays[f"tap.mean.{c}"] = self.tap_stats[c].mean
            arrays[f"tap.var.{c}"] = self.tap_stats[c].var
        return arrays

    def save_checkpoint(self, path) -> None:
        st = self.rng.bit_generator.state
        mask = (1 << 64) - 1
        words = [st["state"]["state"] & mask, st["state"]["state"] >> 64,
                 st["state"]["inc"] & mask, st["state"]["inc"] >> 64, st["has_uint32"], st["uinteger"]]
        manifest = {
            "format": 1,
            "config_hash": self.config_hash(),
            "t": self.t,
            "step_count": self.opt.step_count,
            "prompt_lr": self.opt.group("prompt").lr if self.prompt is not None else None,
            "rng": words,
            "reg_tasks_merged": self.reg.tasks_merged,
            "nmc_counts": {str(c): n for c, n in sorted((self.nmc.counts if self.nmc else {}).items())},
            "tap_counts": {str(c): s.count for c, s in sorted(self.tap_stats.items())},
            "record": {
                "acc": self.acc, "acc_local": self.acc_local, "losses": self.losses,
                "p_sim": self.p_sim_values, "p_sim_init": self.p_sim_init,
            },
        }
        raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
        atomic_write_bytes(path, CKP1_MAGIC + struct.pack("<I", len(raw)) + raw
                           + pack_tensors(self._arrays(), "<f8"))

    def load_checkpoint(self, path) -> None:
        manifest, arrays = read_checkpoint(path)
        if manifest["config_hash"] != self.config_hash():
            raise FormatError("checkpoint was written for a different configuration", 8)
        for k, p in self.trainable().items():
            p.data[...] = arrays[k]
        for k, p in self.head.params().items():
            p.data[...] = arrays[k]
        self.opt.load_state_arrays(arrays, manifest["step_count"])
        if self.prompt is not None:
            self.opt.group("prompt").lr = manifest["prompt_lr"]
        self.reg.load_arrays(arrays)
        self.reg.tasks_merged = manifest["reg_tasks_merged"]
        if self.nmc is not None:
            self.nmc.sums = {int(c): arrays[f"nmc.sum.{c}"].copy() for c in manifest["nmc_counts"]}
            self.nmc.counts = {int(c): n for c, n in manifest["nmc_counts"].items()}
        from .methods import ClassStats
        self.tap_stats = {int(c): ClassStats(arrays[f"tap.mean.{c}"].copy(), arrays[f"tap.var.{c}"].copy(), n)
                          for c, n in manifest["tap_counts"].items()}
        w = [int(x) for x in manifest["rng"]]
        self.rng.bit_generator.state = {
            "bit_generator": "PCG64", "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
            "has_uint32": w[4], "uinteger": w[5],
        }
        rec = manifest["record"]
        self.acc, self.acc_local = rec["acc"], rec["acc_local"]
        self.losses, self.p_sim_values, self.p_sim_init = rec["losses"], rec["p_sim"], rec["p_sim_init"]
        self.t = manifest["t"]


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKP1_MAGIC:
        raise FormatError("bad magic, expected b'CKP1'", 0)
    if len(buf) < 8:
        raise FormatError("truncated manifest length", 4)
    (n,) = struct.unpack("<I", buf[4:8])
    if 8 + n > len(buf):
        raise FormatError("truncated manifest", 8)
    try:
        manifest = json.loads(buf[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("manifest is not valid JSON", 8) from None
    arrays, end = unpack_tensors(buf, 8 + n, "<f8")
    if end != len(buf):
        raise FormatError("trailing bytes after last tensor", end)
    return manifest, arrays


def run_stream(dataset: Dataset, stream: StreamSpec, backbone: BackboneState,
               method: MethodConfig = MethodConfig(), train: TrainConfig = TrainConfig(),
               checkpoint=None, resume=None, stop_after: int | None = None) -> RunRecord:
    """Train all tasks in order and return the run record.

    ``checkpoint`` is rewritten after every task; ``resume`` restarts from
    such a file. ``stop_after`` ends the run once that task is done, which
    leaves an incomplete record (used to split a run in two).
    """
    runner = StreamRunner(dataset, stream, backbone, method, train)
    if resume is not None:
        runner.load_checkpoint(resume)
    while runner.t < stream.n_tasks:
        t = runner.t
        runner.train_task(t)
        if checkpoint is not None:
            runner.save_checkpoint(checkpoint)
        if stop_after is not None and t >= stop_after:
            break
    return runner.record()


def pretrain_backbone(dataset: Dataset, config, finetune: FinetuneConfig = FinetuneConfig(),
                      seed: int = 0, path=None) -> BackboneState:
    """Train a fresh backbone on an upstream dataset; return it frozen.

    Weights are rounded to f32 so the returned state equals what the PTW1
    file holds.
    """
    init = BackboneState.init(config, np.random.default_rng(seed)).freeze()
    idx = np.flatnonzero(dataset.split == 0)
    trained, _, _ = finetune_backbone(init, dataset, idx, replace(finetune, seed=seed))
    state = round_to_f32(trained)
    if path is not None:
        save_backbone(state, path)
    return state
