"""Loss, class weighting, Adam and the training loop.

Training schemes:

``Scratch``
    Xavier initialization, lr 2.5e-4, 30 epochs.
``FromPretrained``
    start from an SPGW checkpoint (e.g. trained on ECG), lr 1e-4, 5 epochs.
``TransferLearn``
    as ``FromPretrained`` but run once per fold of a fold manifest, each fold
    fine-tuned and evaluated independently.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._errors import ConfigError, DataError
from .metrics import per_patient_summary
from .nn.init import xavier_init  # noqa: F401  (re-exported)
from .nn.models import Model
from .nn.spgw import load_weights, save_weights
from .records import N_CLASSES, SleepStage

log = logging.getLogger(__name__)

SCHEMES = ("Scratch", "FromPretrained", "TransferLearn")
_PRESETS = {
    "Scratch": dict(learning_rate=2.5e-4, epochs=30),
    "FromPretrained": dict(learning_rate=1.0e-4, epochs=5),
    "TransferLearn": dict(learning_rate=1.0e-4, epochs=5),
}
CLASS_WEIGHT_CAP = 10.0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-4
    epochs: int = 30
    batch_size: int = 8
    scheme: str = "Scratch"
    seed: int = 0
    dropout: float = 0.2
    validation_fraction: float = 0.1
    # reinitialize weights under these prefixes after loading a checkpoint
    reset_prefixes: tuple = ()

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown training scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate > 0, epochs >= 0 and batch_size >= 1 required")

    @classmethod
    def preset(cls, scheme: str, **overrides) -> "TrainConfig":
        if scheme not in _PRESETS:
            raise ConfigError(f"unknown training scheme {scheme!r}; choose from {SCHEMES}")
        return cls(scheme=scheme, **{**_PRESETS[scheme], **overrides})


# -- loss ----------------------------------------------------------------------

def _valid_labels(y):
    y = np.asarray(y)
    valid = y != SleepStage.PAD
    return np.where(valid, y, 0).astype(np.intp), valid


def weighted_cross_entropy(probs, labels, weights, eps: float = 1e-12):
    """Sample-weighted categorical cross-entropy over unpadded windows.

    ``loss = -sum_l w_l log P[l, y_l] / sum_l w_l``. Returns ``(loss, dloss/dP)``.
    Pad windows get zero weight regardless of ``weights``.
    """
    p = np.asarray(probs, dtype=np.float64)
    y, valid = _valid_labels(labels)
    w = np.where(valid, np.asarray(weights, dtype=np.float64), 0.0)
    total = w.sum()
    if not total > 0:
        raise DataError("all windows are padded or zero-weighted")
    picked = np.take_along_axis(p, y[..., None], axis=-1)[..., 0]
    loss = float(-(w * np.log(np.maximum(picked, eps))).sum() / total)
    grad = np.zeros_like(p)
    np.put_along_axis(grad, y[..., None], (-w / (total * np.maximum(picked, eps)))[..., None], axis=-1)
    return loss, grad


def cross_entropy_logit_grad(probs, labels, weights):
    """Gradient of the weighted loss w.r.t. the pre-softmax logits."""
    p = np.asarray(probs, dtype=np.float64)
    y, valid = _valid_labels(labels)
    w = np.where(valid, np.asarray(weights, dtype=np.float64), 0.0)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    return (w / w.sum())[..., None] * (p - onehot)


def class_weights(hypnograms, cap: float = CLASS_WEIGHT_CAP) -> np.ndarray:
    """Inverse-frequency class weights ``N / (4 N_c)`` capped at ``cap``.

    Absent classes get the cap and Pad windows are ignored. The weights are
    left unscaled here; :func:`sample_weights` normalizes them to mean 1 over
    the scored windows of each record.
    """
    counts = np.zeros(N_CLASSES)
    for h in hypnograms:
        h = np.asarray(h)
        counts += np.bincount(h[h != SleepStage.PAD].astype(int), minlength=N_CLASSES)[:N_CLASSES]
    total = counts.sum()
    if total == 0:
        raise DataError("no scored windows to derive class weights from")
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (N_CLASSES * counts), cap)
    return np.minimum(w, cap)


def sample_weights(hypnogram, cweights) -> np.ndarray:
    """Per-window weights: class weight of the label, 0 on Pad, mean 1 over scored windows."""
    y, valid = _valid_labels(hypnogram)
    w = np.where(valid, np.asarray(cweights)[y], 0.0)
    if valid.any() and w[valid].mean() > 0:
        w = w / w[valid].mean()
    return w


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``weights`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for {name} at step {state.step + 1}"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, g in grads.items():
        w = weights[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g, dtype=np.float64)
            state.v[name] = np.zeros_like(g, dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g, dtype=np.float64)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        w -= update.astype(w.dtype)
    return state


# -- dataset and loop ----------------------------------------------------------

@dataclass
class Dataset:
    """Model-ready arrays for a set of records.

    ``inputs`` is ``(N, ...)`` in the architecture's input layout, ``labels``
    ``(N, L)`` hypnograms, ``demographics`` ``(N, M)``.
    """

    ids: list
    inputs: np.ndarray
    labels: np.ndarray
    demographics: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.inputs) == len(self.labels) == len(self.demographics) == n):
            raise DataError("dataset arrays disagree on the number of records")

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.ids[i] for i in idx], self.inputs[idx], self.labels[idx],
                       self.demographics[idx])

    def select_ids(self, ids) -> "Dataset":
        pos = {k: i for i, k in enumerate(self.ids)}
        try:
            return self.subset([pos[k] for k in ids])
        except KeyError as exc:
            raise DataError(f"record {exc.args[0]!r} not in dataset") from None


def split_validation(n: int, fraction: float, seed: int):
    """Seeded shuffle; the last ``fraction`` of records become the validation split."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(n * fraction))
    if n_val == 0 or n_val == n:
        return sorted(order.tolist()), []
    return sorted(order[: n - n_val].tolist()), sorted(order[n - n_val :].tolist())


def predict_proba(model: Model, dataset: Dataset, batch_size: int = 8) -> np.ndarray:
    out = []
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        out.append(model.forward(dataset.inputs[sl], dataset.demographics[sl]))
    return np.concatenate(out, axis=0)


def _batch_seed(seed, epoch, batch):
    return np.random.SeedSequence([int(seed), epoch, batch])


def run_training(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    *,
    pretrained: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    validation: Dataset | None = None,
) -> tuple[Model, list]:
    """Train ``model`` in place and return ``(model, history)``.

    History holds one dict per epoch with the mean training loss, training
    accuracy and, when a validation split exists, the median per-record
    kappa and accuracy on it.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if not model.differentiable:
        from ._errors import UnsupportedLayerError

        raise UnsupportedLayerError(f"{model.arch} cannot be trained (inference-only layers)")
    if config.scheme != "Scratch":
        if pretrained is None:
            raise ConfigError(f"scheme {config.scheme} needs a pretrained SPGW checkpoint")
        load_weights(pretrained, model)
        if config.reset_prefixes:
            _reinitialize(model, config.reset_prefixes, config.seed)
    _set_dropout(model, config.dropout)

    train_ds = dataset
    if validation is None and config.validation_fraction > 0:
        tr, va = split_validation(len(dataset), config.validation_fraction, config.seed)
        if va:
            train_ds, validation = dataset.subset(tr), dataset.subset(va)
    cw = class_weights(train_ds.labels)
    weights_all = np.stack([sample_weights(h, cw) for h in train_ds.labels])

    state = AdamState()
    params = model.weights
    history = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt:
        ckpt.mkdir(parents=True, exist_ok=True)
        (ckpt / "history.jsonl").write_text("")
    best = -np.inf
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_ds))
        loss_sum = weight_sum = 0.0
        correct = scored = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[start : start + config.batch_size])
            x = train_ds.inputs[idx]
            y = train_ds.labels[idx]
            w = weights_all[idx]
            probs, tape = model.forward(x, train_ds.demographics[idx], mode="train",
                                        seed=_batch_seed(config.seed, epoch, b))
            loss, _ = weighted_cross_entropy(probs, y, w)
            grads = model.backward(tape, dlogits=cross_entropy_logit_grad(probs, y, w))
            adam_step(params, grads, state, config.learning_rate)
            bw = float(np.where(y != SleepStage.PAD, w, 0).sum())
            loss_sum += loss * bw
            weight_sum += bw
            mask = y != SleepStage.PAD
            correct += int(np.sum((probs.argmax(-1) == y) & mask))
            scored += int(mask.sum())
        entry = {
            "epoch": epoch,
            "loss": loss_sum / weight_sum,
            "train_accuracy": correct / max(scored, 1),
        }
        if validation is not None and len(validation):
            summary = per_patient_summary(validation.labels, predict_proba(model, validation).argmax(-1))
            entry["val_kappa"] = summary["kappa_median"]
            entry["val_accuracy"] = summary["accuracy_median"]
        history.append(entry)
        log.info("epoch %d: %s", epoch, entry)
        if ckpt:
            save_weights(model, ckpt / f"epoch_{epoch:03d}.spgw")
            with open(ckpt / "history.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            score = entry.get("val_kappa", -entry["loss"])
            if score > best:
                best = score
                save_weights(model, ckpt / "best.spgw")
    return model, history


def _set_dropout(model, rate):
    from .nn.layers import Dropout

    def visit(layer):
        if isinstance(layer, Dropout):
            layer.rate = rate
        for c in layer.children():
            visit(c)

    for _, layer in model.stages:
        visit(layer)


def _reinitialize(model, prefixes, seed):
    from .nn.init import name_seed

    for name, arr in model.weights.items():
        if name.startswith(tuple(prefixes)):
            if name.endswith("kernel"):
                arr[...] = xavier_init(arr.shape, name_seed(seed, name), arr.dtype)
            else:
                arr[...] = 0


# -- folds -----------------------------------------------------------------------

def make_folds(ids: Sequence[str], n_folds: int = 4, seed: int = 0) -> dict:
    """Fold manifest with disjoint test partitions covering every record once."""
    ids = list(ids)
    if len(ids) < n_folds:
        raise DataError(f"need at least {n_folds} records for {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    parts = np.array_split(order, n_folds)
    folds = []
    for k in range(n_folds):
        test = [ids[i] for i in sorted(parts[k])]
        train = [ids[i] for i in sorted(np.concatenate([parts[j] for j in range(n_folds) if j != k]))]
        folds.append({"train": train, "test": test})
    return {"folds": folds}


def load_fold_manifest(path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text())
        folds = manifest["folds"]
        for f in folds:
            f["train"], f["test"] = list(f["train"]), list(f["test"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: invalid fold manifest ({exc})") from None
    return manifest


def run_transfer_learning(
    model_factory,
    dataset: Dataset,
    manifest: dict,
    config: TrainConfig,
    pretrained,
    checkpoint_dir=None,
):
    """Fine-tune a fresh copy of the pretrained model on each fold.

    ``model_factory()`` must return a model of the pretrained architecture.
    Returns ``(test_probs, histories)`` where ``test_probs`` maps record id to
    its ``(L, 4)`` probabilities from the fold in which it was a test record.
    """
    config = dataclasses.replace(config, scheme="TransferLearn")
    probs, histories = {}, []
    for k, fold in enumerate(manifest["folds"]):
        overlap = set(fold["train"]) & set(fold["test"])
        if overlap:
            raise ConfigError(f"fold {k}: records in both train and test: {sorted(overlap)[:3]}")
        model = model_factory()
        ck = Path(checkpoint_dir) / f"fold_{k}" if checkpoint_dir else None
        model, hist = run_training(model, dataset.select_ids(fold["train"]), config,
                                   pretrained=pretrained, checkpoint_dir=ck)
        histories.append(hist)
        test = dataset.select_ids(fold["test"])
        for rid, p in zip(test.ids, predict_proba(model, test)):
            probs[rid] = p
    return probs, histories
