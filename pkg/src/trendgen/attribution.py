"""Per-attribute classifier heads over the 1024-d concatenated embedding.

Each attribute gets an independent funnel network (1024 -> 512 -> 256 -> C)
with PReLU and dropout 0.5 after both hidden layers; softmax is applied at
inference, cross-entropy drives training. Heads are immutable once trained
and safe to share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .catalog import Catalog, CatalogError, atomic_write_text
from .nn import (
    DropoutRng,
    Gradients,
    Mlp,
    SgdOptimizer,
    TrainConfig,
    backward,
    forward,
    init_mlp,
    load_model,
    save_model,
)

log = logging.getLogger(__name__)

HIDDEN_WIDTHS = (512, 256)
HEAD_DROPOUT = 0.5


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes."""
    probs = np.atleast_2d(probs)
    picked = probs[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.clip(picked, 1e-12, None))))


def ce_loss_fn(X: np.ndarray, y: np.ndarray) -> Callable[[Mlp], tuple[float, Gradients]]:
    """Deterministic (inference-mode) cross-entropy loss with analytic
    gradients, shaped for finite_diff_check."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def loss(net: Mlp) -> tuple[float, Gradients]:
        fwd = forward(net, X)
        probs = softmax(fwd.out[-1])
        value = cross_entropy(probs, y)
        upstream = probs.copy()
        upstream[np.arange(len(y)), y] -= 1.0
        upstream /= len(y)
        return value, backward(net, fwd, upstream)

    return loss


@dataclass
class AttributeHead:
    """Trained classifier for one attribute; outputs a distribution over
    class_labels in their stored order."""

    attribute_name: str
    class_labels: list[str]
    net: Mlp
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.class_labels) < 2:
            raise ValueError(f"head {self.attribute_name!r}: needs >= 2 classes")
        if self.net.out_dim != len(self.class_labels):
            raise ValueError(
                f"head {self.attribute_name!r}: net width {self.net.out_dim} != "
                f"{len(self.class_labels)} labels"
            )


@dataclass
class AttributionModel:
    heads: dict[str, AttributeHead] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, head in self.heads.items():
            if head.attribute_name != name:
                raise ValueError(f"head key {name!r} != head name {head.attribute_name!r}")

    def add(self, head: AttributeHead) -> None:
        if head.attribute_name in self.heads:
            raise ValueError(f"duplicate attribute {head.attribute_name!r}")
        self.heads[head.attribute_name] = head


def _as_matrix(labeled: Sequence[tuple[np.ndarray, int]] | tuple[np.ndarray, np.ndarray]):
    if isinstance(labeled, tuple) and len(labeled) == 2 and not isinstance(labeled[0], tuple):
        X = np.asarray(labeled[0], dtype=np.float64)
        y = np.asarray(labeled[1], dtype=np.int64)
    else:
        if len(labeled) == 0:
            raise ValueError("empty training set")
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in labeled])
        y = np.asarray([c for _, c in labeled], dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    if X.ndim != 2:
        raise ValueError(f"inputs must be vectors, got shape {X.shape}")
    return X, y


def train_head(
    labeled,
    attribute_name: str,
    labels: Sequence[str],
    config: TrainConfig,
) -> AttributeHead:
    """Train one attribute head with minibatch SGD.

    ``labeled`` is a list of (embedding, class index) pairs or an (X, y)
    tuple. The same config.seed yields bitwise-identical weights: init,
    shuffling and dropout masks all derive from it through independent
    spawned streams.
    """
    X, y = _as_matrix(labeled)
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError(f"{attribute_name!r}: needs at least 2 classes, got {len(labels)}")
    if y.min() < 0 or y.max() >= len(labels):
        raise ValueError(
            f"{attribute_name!r}: class index {int(y.max())} outside 0..{len(labels) - 1}"
        )
    if len(np.unique(y)) < 2:
        raise ValueError(f"{attribute_name!r}: training data covers a single class")

    init_seed, shuffle_seed, drop_seed = (
        s.generate_state(1)[0] for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    net = init_mlp(
        [X.shape[1], *HIDDEN_WIDTHS, len(labels)],
        seed=int(init_seed),
        dropout_prob=HEAD_DROPOUT,
    )
    opt = SgdOptimizer(net, config.learning_rate, config.optimizer)
    shuffle = np.random.default_rng(int(shuffle_seed))
    drop = DropoutRng(seed=int(drop_seed))

    epoch_losses = []
    n = len(X)
    for epoch in range(config.epochs):
        perm = shuffle.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            fwd = forward(net, xb, train=True, rng=drop.next_pass())
            probs = softmax(fwd.out[-1])
            total += cross_entropy(probs, yb)
            batches += 1
            upstream = probs
            upstream[np.arange(len(yb)), yb] -= 1.0
            upstream /= len(yb)
            opt.step(backward(net, fwd, upstream))
        epoch_losses.append(total / batches)
        log.debug("%s epoch %d ce=%.4f", attribute_name, epoch, epoch_losses[-1])
    return AttributeHead(
        attribute_name=attribute_name,
        class_labels=labels,
        net=net,
        epoch_losses=epoch_losses,
    )


def predict(head: AttributeHead, x: np.ndarray) -> tuple[str, np.ndarray]:
    """Dropout-free inference: (argmax label, full distribution)."""
    probs = softmax(forward(head.net, np.asarray(x, dtype=np.float64)).output)
    return head.class_labels[int(np.argmax(probs))], probs


def predict_batch(head: AttributeHead, X: np.ndarray) -> np.ndarray:
    """Class indices for a batch."""
    probs = softmax(forward(head.net, np.asarray(X, dtype=np.float64)).output)
    return np.argmax(np.atleast_2d(probs), axis=1)


def evaluate(
    model: AttributionModel,
    labeled_per_attribute: dict[str, tuple[np.ndarray, np.ndarray]],
) -> tuple[dict[str, float], float]:
    """Per-attribute accuracy plus the unweighted macro average."""
    if not labeled_per_attribute:
        raise ValueError("nothing to evaluate")
    accs = {}
    for name, (X, y) in labeled_per_attribute.items():
        if name not in model.heads:
            raise ValueError(f"no trained head for attribute {name!r}")
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise ValueError(f"{name!r}: empty test set")
        pred = predict_batch(model.heads[name], X)
        accs[name] = float(np.mean(pred == y))
    macro = float(np.mean(list(accs.values())))
    return accs, macro


# --- labeled-data file and catalog-derived labels -------------------------------

def save_labeled_file(records: Iterable[tuple[str, str, str]], path: str | Path) -> None:
    """Line-delimited (product_id, attribute_name, label) records."""
    lines = [
        json.dumps(
            {"product_id": pid, "attribute_name": attr, "label": label},
            separators=(",", ":"),
        )
        for pid, attr, label in records
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def load_labeled_file(path: str | Path) -> list[tuple[str, str, str]]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append((rec["product_id"], rec["attribute_name"], rec["label"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CatalogError(f"{path}: line {i}: bad labeled record ({exc})") from exc
    return out


def training_set_from_records(
    catalog: Catalog,
    records: Sequence[tuple[str, str, str]],
    attribute_name: str,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Join labeled records against the catalog's concat embeddings.

    Returns (X, y, class_labels) with labels sorted for a stable index order.
    """
    pairs = []
    for pid, attr, label in records:
        if attr != attribute_name:
            continue
        if pid not in catalog:
            raise CatalogError(f"labeled record references unknown product {pid!r}")
        pairs.append((pid, label))
    if not pairs:
        raise ValueError(f"no records for attribute {attribute_name!r}")
    labels = sorted({label for _, label in pairs})
    index = {label: i for i, label in enumerate(labels)}
    X = np.stack([catalog.get(pid).concat() for pid, _ in pairs]).astype(np.float64)
    y = np.asarray([index[label] for _, label in pairs], dtype=np.int64)
    return X, y, labels


def records_from_catalog(catalog: Catalog, attribute_name: str) -> list[tuple[str, str, str]]:
    """Derive labeled records from the catalog's own attribute annotations
    (division, category or color)."""
    out = []
    for product in catalog:
        attrs = product.attributes
        if attribute_name == "division":
            label = attrs.division.value
        elif attribute_name == "category":
            label = attrs.category
        elif attribute_name == "color":
            label = attrs.color
        else:
            raise ValueError(f"catalog has no attribute {attribute_name!r}")
        out.append((product.product_id, attribute_name, label))
    return out


# --- persistence -----------------------------------------------------------------

def save_attribution(model: AttributionModel, directory: str | Path) -> None:
    """One snapshot + one JSON label sidecar per head under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, head in sorted(model.heads.items()):
        save_model(head.net, directory / f"{name}.tgnn")
        sidecar = {
            "attribute_name": name,
            "class_labels": head.class_labels,
            "epoch_losses": head.epoch_losses,
        }
        atomic_write_text(directory / f"{name}.labels.json",
                          json.dumps(sidecar, indent=2) + "\n")


def load_attribution(directory: str | Path) -> AttributionModel:
    directory = Path(directory)
    model = AttributionModel()
    for sidecar_path in sorted(directory.glob("*.labels.json")):
        sidecar = json.loads(sidecar_path.read_text())
        name = sidecar["attribute_name"]
        net, _ = load_model(directory / f"{name}.tgnn")
        model.add(AttributeHead(
            attribute_name=name,
            class_labels=list(sidecar["class_labels"]),
            net=net,
            epoch_losses=list(sidecar.get("epoch_losses", [])),
        ))
    return model
