"""Prompt strategies, query retrieval, classifier heads and weight regularizers.

Three prompt strategies share one container, :class:`PromptState`:

``only_prompt``
    one set of ``N`` input tokens used for every sample; parameter counts
    that are not a multiple of ``D`` are reached by zero-padding the last
    token with frozen entries.
``pool``
    ``M`` key/value prompts; each sample retrieves its ``top_n`` keys by
    cosine similarity to a frozen query feature and prepends the matching
    values in rank order. Keys are trained only through the surrogate loss.
``weighted``
    every sample gets ``sum_j alpha_j P_j`` with ``alpha`` a softmax over
    query/key cosine similarities, differentiable into keys and values.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import Adam, ParamGroup
from .tensor import Tape, Tensor

STRATEGIES = ("only_prompt", "pool", "weighted")


# -- prompt containers ---------------------------------------------------------


@dataclass
class PromptState:
    strategy: str
    values: Tensor  # (M, L_p, D)
    keys: Tensor | None  # (M, D)
    mask: np.ndarray  # bool, same shape as values
    top_n: int = 1
    lam: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown prompt strategy {self.strategy!r}")
        if self.mask.shape != self.values.shape:
            raise ValueError("trainable mask must match the prompt values")
        if self.strategy != "only_prompt" and self.keys is None:
            raise ValueError(f"{self.strategy} prompts need keys")
        if not 1 <= self.top_n <= self.pool_size:
            raise ValueError("top_n must lie in [1, M]")

    @property
    def pool_size(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def n_prompt_params(self) -> int:
        return int(self.mask.sum())

    @property
    def n_key_params(self) -> int:
        return 0 if self.keys is None else self.keys.size

    @property
    def n_tokens(self) -> int:
        """Tokens prepended per sample."""
        if self.strategy == "pool":
            return self.top_n * self.length
        return self.length

    def params(self) -> dict[str, Tensor]:
        out = {"prompt.values": self.values}
        if self.keys is not None:
            out["prompt.keys"] = self.keys
        return out

    def masks(self) -> dict[str, np.ndarray]:
        return {"prompt.values": self.mask}


def _uniform(rng, shape, dim):
    bound = 1.0 / math.sqrt(dim)
    return rng.uniform(-bound, bound, size=shape)


def build_only_prompt(n_params: int, dim: int, rng: np.random.Generator, lam: float = 1.0) -> PromptState:
    """``ceil(n_params / dim)`` tokens; the tail of the last one is frozen at zero."""
    if n_params < 1:
        raise ValueError("n_params must be at least 1")
    n_tok = -(-n_params // dim)
    mask = np.zeros(n_tok * dim, dtype=bool)
    mask[:n_params] = True
    mask = mask.reshape(1, n_tok, dim)
    values = np.where(mask, _uniform(rng, mask.shape, dim), 0.0)
    return PromptState("only_prompt", Tensor(values, requires_grad=True), None, mask, 1, lam)


def build_pool(pool_size: int, length: int, dim: int, top_n: int, rng: np.random.Generator,
               lam: float = 1.0) -> PromptState:
    shape = (pool_size, length, dim)
    keys = Tensor(_uniform(rng, (pool_size, dim), dim), requires_grad=True)
    values = Tensor(_uniform(rng, shape, dim), requires_grad=True)
    return PromptState("pool", values, keys, np.ones(shape, dtype=bool), top_n, lam)


def build_weighted(pool_size: int, length: int, dim: int, rng: np.random.Generator,
                   lam: float = 1.0) -> PromptState:
    shape = (pool_size, length, dim)
    keys = Tensor(_uniform(rng, (pool_size, dim), dim), requires_grad=True)
    values = Tensor(_uniform(rng, shape, dim), requires_grad=True)
    return PromptState("weighted", values, keys, np.ones(shape, dtype=bool), pool_size, lam)


# -- retrieval -----------------------------------------------------------------


def cosine_matrix(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Cosine similarities ``(B, M)``; a zero-norm side scores -1."""
    qn = np.linalg.norm(queries, axis=-1, keepdims=True)
    kn = np.linalg.norm(keys, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (queries @ keys.T) / (qn * kn[None, :])
    bad = (qn == 0) | (kn[None, :] == 0)
    return np.where(bad, -1.0, sim)


def retrieve_top_n(query: np.ndarray, keys: np.ndarray, top_n: int) -> np.ndarray:
    """Indices of the ``top_n`` most cosine-similar keys, best first.

    Accepts one query ``(D,)`` or a batch ``(B, D)``. Ties go to the lower
    index. Selection is not differentiable.
    """
    keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
    m = keys.shape[0]
    if not 1 <= top_n <= m:
        raise ValueError(f"top_n must lie in [1, {m}]")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    sim = cosine_matrix(np.atleast_2d(q), keys)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :top_n]
    return order[0] if single else order


def surrogate_key_loss(query: np.ndarray, selected_keys: Tensor) -> Tensor:
    """Mean of ``1 - cos(query, key)`` over the selected keys.

    ``query`` is ``(D,)`` with keys ``(n, D)``, or ``(B, D)`` with keys
    ``(B, n, D)``. The query side is a constant.
    """
    q = np.asarray(query, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
    kn = T.l2_normalize(selected_keys)
    cos = T.tsum(T.mul(kn, Tensor._result(qn[..., None, :])), axis=-1)
    return T.sub(1.0, T.mean(cos))


def weighted_compose(query: np.ndarray, keys: Tensor, values: Tensor) -> tuple[Tensor, np.ndarray]:
    """Softmax(cosine)-weighted sum of prompt values.

    Returns the composed prompt(s), ``(L_p, D)`` or ``(B, L_p, D)``, and the
    weights ``alpha``.
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    qn = q2 / np.maximum(np.linalg.norm(q2, axis=-1, keepdims=True), 1e-12)
    m, lp, d = values.shape
    sims = T.matmul(Tensor._result(qn), T.swapaxes(T.l2_normalize(keys), 0, 1))
    alpha = T.softmax_rows(sims)
    flat = T.matmul(alpha, T.reshape(values, (m, lp * d)))
    out = T.reshape(flat, (len(q2), lp, d))
    if single:
        out = T.reshape(out, (lp, d))
        return out, alpha.data[0]
    return out, alpha.data


@dataclass
class Assembled:
    prompts: Tensor | None  # (N_tok, D) shared or (B, N_tok, D)
    surrogate: Tensor | None
    retrieved: np.ndarray | None  # (B, N_tok * D) flattened prompt actually inserted
    indices: np.ndarray | None = None


def assemble_prompts(state: PromptState | None, queries: np.ndarray | None, batch: int) -> Assembled:
    """Build the prompt tokens for one batch under ``state``'s strategy."""
    if state is None:
        return Assembled(None, None, None)
    m, lp, d = state.values.shape
    if state.strategy == "only_prompt":
        prompts = T.reshape(state.values, (lp, d))
        flat = np.broadcast_to(state.values.data.reshape(1, -1), (batch, lp * d))
        return Assembled(prompts, None, flat)
    if queries is None:
        raise ValueError(f"{state.strategy} prompts need query features")
    if state.strategy == "pool":
        idx = retrieve_top_n(queries, state.keys.data, state.top_n)
        n = state.top_n
        if np.all(idx == idx[0]):
            # every sample picked the same prompts: insert one shared copy
            prompts = T.reshape(T.take(state.values, idx[0], axis=0), (n * lp, d))
            flat = np.broadcast_to(prompts.data.reshape(1, -1), (batch, n * lp * d))
        else:
            prompts = T.reshape(T.take(state.values, idx.reshape(-1), axis=0), (batch, n * lp, d))
            flat = prompts.data.reshape(batch, -1)
        keys = T.reshape(T.take(state.keys, idx.reshape(-1), axis=0), (batch, n, d))
        surrogate = surrogate_key_loss(queries, keys)
        return Assembled(prompts, surrogate, flat, idx)
    prompts, _ = weighted_compose(queries, state.keys, state.values)
    return Assembled(prompts, None, prompts.data.reshape(batch, -1))


# -- loss ----------------------------------------------------------------------


def masked_cross_entropy(logits: Tensor, labels, active_classes) -> Tensor:
    """Cross-entropy restricted to ``active_classes``.

    Inactive logits are never read, so their gradient is exactly zero and
    perturbing them cannot change the loss.
    """
    active = sorted(int(c) for c in active_classes)
    pos = {c: i for i, c in enumerate(active)}
    single = logits.ndim == 1
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    try:
        local = [pos[int(y)] for y in lab]
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} is not an active class") from None
    if single:
        logits = T.reshape(logits, (1, -1))
    return T.cross_entropy(T.take(logits, active, axis=-1), local)


# -- heads ---------------------------------------------------------------------


class LinearHead:
    kind = "linear"

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform(rng, (n_classes, dim), dim), requires_grad=True)
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True)
        self.seen: set[int] = set()

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def logits(self, features: Tensor) -> Tensor:
        return T.add(T.matmul(features, T.swapaxes(self.weight, 0, 1)), self.bias)

    def predict(self, features: np.ndarray, classes) -> np.ndarray:
        """Arg-max over ``classes`` only; ties go to the lower class id."""
        classes = np.array(sorted(classes))
        scores = features @ self.weight.data[classes].T + self.bias.data[classes]
        return classes[np.argmax(scores, axis=1)]


class NMCHead:
    """Nearest class mean over frozen features."""

    kind = "nmc"

    def __init__(self, dim: int):
        self.dim = dim
        self.sums: dict[int, np.ndarray] = {}
        self.counts: dict[int, int] = {}

    @property
    def seen(self) -> set[int]:
        return set(self.counts)

    def fit(self, features: np.ndarray, labels) -> "NMCHead":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        for f, y in zip(features, np.atleast_1d(labels)):
            y = int(y)
            if y not in self.sums:
                self.sums[y] = np.zeros(self.dim)
                self.counts[y] = 0
            self.sums[y] = self.sums[y] + f
            self.counts[y] += 1
        return self

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        classes = np.array(sorted(self.counts))
        return classes, np.stack([self.sums[c] / self.counts[c] for c in classes])

    def predict(self, features: np.ndarray, classes=None) -> np.ndarray:
        if not self.counts:
            raise RuntimeError("NMC head has not been fitted")
        cls, mu = self.means()
        if classes is not None:
            keep = np.isin(cls, list(classes))
            cls, mu = cls[keep], mu[keep]
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d2 = ((f[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
        return cls[np.argmin(d2, axis=1)]


def nmc_fit(features, labels, head: NMCHead) -> NMCHead:
    return head.fit(features, labels)


def nmc_predict(feature, head: NMCHead) -> int:
    return int(head.predict(np.atleast_2d(feature))[0])


# -- TAP head alignment ---------------------------------------------------------


@dataclass
class ClassStats:
    mean: np.ndarray
    var: np.ndarray
    count: int


def class_statistics(features: np.ndarray, labels) -> dict[int, ClassStats]:
    labels = np.asarray(labels)
    return {int(c): ClassStats(features[labels == c].mean(axis=0), features[labels == c].var(axis=0),
                               int((labels == c).sum()))
            for c in np.unique(labels)}


def tap_align(head: LinearHead, stats: dict[int, ClassStats], classes, samples_per_class: int = 64,
              epochs: int = 10, seed: int = 0, lr: float = 1e-3, batch_size: int = 64) -> LinearHead:
    """Retrain the linear head on Gaussian pseudo-features of every seen class."""
    classes = sorted(int(c) for c in classes)
    missing = [c for c in classes if c not in stats]
    if missing:
        raise KeyError(f"no feature statistics for classes {missing}")
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for c in classes:
        s = stats[c]
        feats.append(rng.normal(s.mean, np.sqrt(s.var), size=(samples_per_class, len(s.mean))))
        labels.append(np.full(samples_per_class, c))
    feats, labels = np.concatenate(feats), np.concatenate(labels)
    opt = Adam([ParamGroup("head", lr, head.params())])
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        for i in range(0, len(order), batch_size):
            sel = order[i:i + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = masked_cross_entropy(head.logits(Tensor._result(feats[sel])), labels[sel], classes)
            tape.backward(loss)
            opt.step()
    opt.zero_grad()
    return head


# -- weight regularizers ----------------------------------------------------------


@dataclass
class RegState:
    kind: str = "none"
    strength: float = 0.0
    damping: float = 0.1
    anchor: dict[str, np.ndarray] | None = None
    fisher: dict[str, np.ndarray] | None = None
    tasks_merged: int = 0
    omega: dict[str, np.ndarray] = field(default_factory=dict)
    big_omega: dict[str, np.ndarray] = field(default_factory=dict)
    task_start: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("none", "ewc", "si"):
            raise ValueError(f"unknown regularizer {self.kind!r}")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.strength != 0.0 and self.anchor is not None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, d in (("anchor", self.anchor), ("fisher", self.fisher), ("omega", self.omega),
                          ("big_omega", self.big_omega), ("task_start", self.task_start)):
            for k, v in (d or {}).items():
                out[f"reg.{prefix}.{k}"] = v
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        groups: dict[str, dict[str, np.ndarray]] = {}
        for name, v in arrays.items():
            if not name.startswith("reg."):
                continue
            rest = name[4:]
            for prefix in ("big_omega", "task_start", "anchor", "fisher", "omega"):
                if rest.startswith(prefix + "."):
                    groups.setdefault(prefix, {})[rest[len(prefix) + 1:]] = v.copy()
                    break
        self.anchor = groups.get("anchor")
        self.fisher = groups.get("fisher")
        self.omega = groups.get("omega", {})
        self.big_omega = groups.get("big_omega", {})
        self.task_start = groups.get("task_start", {})


def _penalty(weights: dict[str, np.ndarray], anchor: dict[str, np.ndarray], params: dict[str, Tensor],
             coef: float) -> Tensor:
    total = None
    for name, p in params.items():
        term = T.tsum(T.mul(Tensor._result(weights[name]), T.square(T.sub(p, Tensor._result(anchor[name])))))
        total = term if total is None else T.add(total, term)
    return T.scale(total, coef)


def ewc_penalty(reg: RegState, params: dict[str, Tensor]) -> Tensor:
    """``(strength / 2) * sum F (theta - theta*)^2``."""
    return _penalty(reg.fisher, reg.anchor, params, 0.5 * reg.strength)


def si_penalty(reg: RegState, params: dict[str, Tensor]) -> Tensor:
    """``strength * sum Omega (theta - theta*)^2``."""
    return _penalty(reg.big_omega, reg.anchor, params, reg.strength)


def reg_penalty(reg: RegState, params: dict[str, Tensor]) -> Tensor | None:
    if not reg.active:
        return None
    return ewc_penalty(reg, params) if reg.kind == "ewc" else si_penalty(reg, params)


def fisher_diagonal(samples, log_probs_fn, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Mean over samples of ``E_{y ~ p(y|x)} [grad log p(y|x)]^2``.

    ``log_probs_fn(sample)`` returns the model's log-probabilities over the
    active classes for one sample as a 1-D tensor; the expectation over
    ``y`` is taken exactly by one backward pass per class.
    """
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    n = 0
    for sample in samples:
        with Tape() as tape:
            logp = log_probs_fn(sample)
            picks = [T.index(logp, y) for y in range(logp.shape[-1])]
        probs = np.exp(logp.data)
        for y, pick in enumerate(picks):
            for p in params.values():
                p.zero_grad()
            tape.backward(pick)
            for k, p in params.items():
                acc[k] += probs[y] * p.grad * p.grad
        n += 1
    for p in params.values():
        p.zero_grad()
    if n == 0:
        return acc
    return {k: v / n for k, v in acc.items()}


def ewc_update_fisher(reg: RegState, samples, log_probs_fn, params: dict[str, Tensor]) -> RegState:
    """Merge this task's Fisher into the running mean and re-anchor."""
    new = fisher_diagonal(samples, log_probs_fn, params)
    if reg.fisher is None:
        reg.fisher = new
    else:
        k = reg.tasks_merged
        reg.fisher = {name: (reg.fisher[name] * k + new[name]) / (k + 1) for name in new}
    reg.tasks_merged += 1
    reg.anchor = {k: p.data.copy() for k, p in params.items()}
    return reg


def si_begin_task(reg: RegState, params: dict[str, Tensor]) -> None:
    reg.task_start = {k: p.data.copy() for k, p in params.items()}
    reg.omega = {k: np.zeros_like(p.data) for k, p in params.items()}


def si_accumulate(reg: RegState, grads: dict[str, np.ndarray], deltas: dict[str, np.ndarray]) -> None:
    """Path integral ``omega += -g * delta_theta`` for one optimizer step."""
    for k, g in grads.items():
        if k not in reg.omega:
            reg.omega[k] = np.zeros_like(g)
        reg.omega[k] -= g * deltas[k]


def si_consolidate(reg: RegState, params: dict[str, Tensor]) -> RegState:
    """Fold the task's path integral into ``Omega`` and re-anchor."""
    for k, p in params.items():
        start = reg.task_start.get(k, p.data)
        dist = (p.data - start) ** 2
        contrib = np.maximum(reg.omega.get(k, np.zeros_like(p.data)), 0.0) / (dist + reg.damping)
        reg.big_omega[k] = reg.big_omega.get(k, np.zeros_like(p.data)) + contrib
    reg.anchor = {k: p.data.copy() for k, p in params.items()}
    reg.tasks_merged += 1
    si_begin_task(reg, params)
    return reg


def train_oracle_query(dataset, indices, backbone, config=None):
    """Copy of ``backbone`` finetuned iid on ``dataset[indices]``, frozen.

    Only the query encoder is replaced; the adapted backbone is untouched.
    """
    from .finetune import FinetuneConfig, finetune_backbone

    oracle, _, _ = finetune_backbone(backbone, dataset, indices, config or FinetuneConfig())
    return oracle


def p_sim_warning(value: float) -> None:
    warnings.warn(f"prompt similarity {value:.2f} is negative", RuntimeWarning, stacklevel=3)
