"""Full-network training of the backbone with a throwaway linear head.

Used to produce the frozen "pretrained" backbone from an upstream dataset
and to build the iid-finetuned query encoder used as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneState, forward_features
from .data import Dataset, to_float
from .methods import LinearHead, masked_cross_entropy
from .optim import Adam, ParamGroup
from .tensor import Tape


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def finetune_backbone(backbone: BackboneState, dataset: Dataset, indices: np.ndarray,
                      config: FinetuneConfig = FinetuneConfig()) -> tuple[BackboneState, LinearHead, list[float]]:
    """Train every backbone weight plus a linear head on ``dataset[indices]``.

    The input backbone is not modified. Returns a frozen trained copy, the
    head, and the mean loss of each epoch.
    """
    indices = np.asarray(indices)
    rng = np.random.default_rng([config.seed, 0xF1])
    net = backbone.copy(frozen=False)
    classes = sorted(int(c) for c in np.unique(dataset.labels[indices]))
    head = LinearHead(dataset.n_classes, net.config.embed_dim, rng)
    opt = Adam([ParamGroup("backbone", config.lr, dict(net.params)),
                ParamGroup("head", config.lr, head.params())])
    history = []
    for epoch in range(config.epochs):
        order = indices[np.random.default_rng([config.seed, epoch]).permutation(len(indices))]
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            sel = order[i:i + config.batch_size]
            opt.zero_grad()
            with Tape() as tape:
                feats = forward_features(to_float(dataset.images[sel]), None, net)
                loss = masked_cross_entropy(head.logits(feats), dataset.labels[sel], classes)
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(sel)
        history.append(total / len(order))
    return net.freeze(), head, history


def probe_accuracy(backbone: BackboneState, dataset: Dataset, train_idx: np.ndarray, test_idx: np.ndarray,
                   epochs: int = 30, lr: float = 1e-2, seed: int = 0) -> float:
    """Test accuracy of a linear head trained on frozen features."""
    with T.no_tape():
        f_train = forward_features(to_float(dataset.images[train_idx]), None, backbone).data
        f_test = forward_features(to_float(dataset.images[test_idx]), None, backbone).data
    y_train, y_test = dataset.labels[train_idx], dataset.labels[test_idx]
    classes = sorted(int(c) for c in np.unique(y_train))
    head = LinearHead(dataset.n_classes, backbone.config.embed_dim, np.random.default_rng(seed))
    opt = Adam([ParamGroup("head", lr, head.params())])
    for _ in range(epochs):
        opt.zero_grad()
        with Tape() as tape:
            loss = masked_cross_entropy(head.logits(T.Tensor(f_train)), y_train, classes)
        tape.backward(loss)
        opt.step()
    return float(np.mean(head.predict(f_test, classes) == y_test))
