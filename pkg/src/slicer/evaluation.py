"""Frozen-encoder evaluation: linear probe and the ablation ladder.

The encoder under test is never updated here; spectrograms are embedded once
(tapeless) and a single linear layer with softmax cross-entropy is trained on
top with full-batch Adam from a zero init. The stratified 20% held-out split
doubles as the early-stopping monitor (patience on its loss, best weights
restored) and as the split accuracy is reported on, so probe results are a
deterministic function of the embeddings and the split seed.

The ablation ladder re-runs pretraining with objective pieces switched on one
at a time (same seeds throughout): one-directional instance contrast only,
plus the symmetric direction, plus the cluster term, plus cluster-guided
counterpart sampling.
"""

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .encoder import EncoderParams, encoder_forward
from .seeding import derive_seed
from .tensor import (Tape, Tensor, add, backward, gather_rows, log, matmul,
                     mean, mul, scale, softmax, tensor_sum)
from .training import AdamState, TrainConfig, adam_step, pretrain


def embed_dataset(params: EncoderParams, data, batch_size: int = 256):
    """Embed labeled spectrograms with a frozen encoder (no tape anywhere).

    ``data`` is a sequence of (spectrogram, label); returns the (N, embed_dim)
    embedding matrix and the labels passed through as an array.
    """
    if len(data) == 0:
        raise ValueError("no spectrograms to embed")
    specs = [s for s, _ in data]
    labels = np.array([l for _, l in data])
    chunks = []
    for start in range(0, len(specs), batch_size):
        batch = np.stack(specs[start:start + batch_size])
        chunks.append(encoder_forward(params, batch).data)
    return np.concatenate(chunks, axis=0), labels


@dataclass
class ProbeResult:
    accuracy: float                # trace(confusion) / total
    per_class_accuracy: dict
    confusion: np.ndarray          # rows: true class, cols: predicted
    split: str                     # human-readable split descriptor
    n_train: int
    n_test: int
    epochs_run: int
    best_val_loss: float


def _stratified_split(y, test_fraction, rng):
    train_idx, test_idx = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if members.size < 4:
            raise ValueError(
                f"class {c} has {members.size} sample(s); need >= 4 per class")
        perm = members[rng.permutation(members.size)]
        n_test = max(1, int(round(test_fraction * members.size)))
        test_idx.extend(perm[:n_test])
        train_idx.extend(perm[n_test:])
    return np.sort(np.array(train_idx)), np.sort(np.array(test_idx))


def _cross_entropy_value(logits, labels):
    # stable -mean log softmax[label], plain numpy (no gradient needed)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def linear_probe(embeddings: np.ndarray, labels, split_seed: int,
                 lr: float = 1e-2, max_epochs: int = 500,
                 patience: int = 10) -> ProbeResult:
    """Train/evaluate a linear classifier on frozen embeddings.

    80/20 stratified split; training runs until the held-out loss has not
    improved for ``patience`` epochs (or ``max_epochs``), then the best
    weights by held-out loss are restored and accuracy is reported on that
    same held-out split.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError(
            f"embeddings {embeddings.shape} do not pair with {labels.shape} labels")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError(f"need >= 2 classes, got {classes.size}")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[l] for l in labels])

    rng = np.random.default_rng(split_seed)
    train_idx, test_idx = _stratified_split(y, 0.2, rng)
    x_train, y_train = embeddings[train_idx], y[train_idx]
    x_test, y_test = embeddings[test_idx], y[test_idx]

    k = classes.size
    w = Tensor(np.zeros((embeddings.shape[1], k)), requires_grad=True)
    b = Tensor(np.zeros((1, k)), requires_grad=True)
    params = {"w": w, "b": b}
    adam = AdamState(lr=lr)
    onehot = np.zeros((len(y_train), k))
    onehot[np.arange(len(y_train)), y_train] = 1.0
    x_train_t = Tensor(x_train)
    zeros_idx = np.zeros(len(y_train), dtype=np.int64)

    best_val = np.inf
    best = (w.data.copy(), b.data.copy())
    best_epoch = 0
    epochs_run = 0
    for epoch in range(max_epochs):
        tape = Tape()
        logits = add(matmul(x_train_t, w, tape=tape),
                     gather_rows(b, zeros_idx, tape=tape), tape=tape)
        picked = tensor_sum(mul(softmax(logits, axis=1, tape=tape),
                                Tensor(onehot), tape=tape), axis=1, tape=tape)
        loss = scale(mean(log(picked, tape=tape), tape=tape), -1.0, tape=tape)
        grads = backward(tape, loss)
        adam_step(adam, params, {"w": grads.of(w), "b": grads.of(b)})
        epochs_run = epoch + 1

        val_loss = _cross_entropy_value(x_test @ w.data + b.data, y_test)
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best = (w.data.copy(), b.data.copy())
            best_epoch = epoch
        elif epoch - best_epoch >= patience:
            break

    w_best, b_best = best
    pred = np.argmax(x_test @ w_best + b_best, axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_test, pred):
        confusion[t, p] += 1
    per_class = {classes[i]: float(confusion[i, i] / confusion[i].sum())
                 for i in range(k)}
    return ProbeResult(accuracy=float(np.trace(confusion) / confusion.sum()),
                       per_class_accuracy=per_class, confusion=confusion,
                       split=f"stratified 80/20, seed {split_seed}",
                       n_train=len(train_idx), n_test=len(test_idx),
                       epochs_run=epochs_run, best_val_loss=best_val)


def format_probe_report(result: ProbeResult) -> str:
    lines = [
        f"probe accuracy {result.accuracy!r} n_test={result.n_test} "
        f"n_train={result.n_train} epochs={result.epochs_run} ({result.split})",
    ]
    for c, acc in sorted(result.per_class_accuracy.items()):
        lines.append(f"  class {c}: {acc:.4f}")
    lines.append("confusion (rows=true, cols=pred):")
    for row in result.confusion:
        lines.append("  " + " ".join(f"{v:4d}" for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablation ladder


LADDER_NAMES = ("moco", "+symmetric", "+cluster", "+kmix")


def standard_ladder(base: TrainConfig):
    """The four-rung ladder; each rung reuses the base seeds and sizes."""
    return [
        ("moco", replace(base, symmetric=False, cluster_loss=False, kmix=False)),
        ("+symmetric", replace(base, symmetric=True, cluster_loss=False, kmix=False)),
        ("+cluster", replace(base, symmetric=True, cluster_loss=True, kmix=False)),
        ("+kmix", replace(base, symmetric=True, cluster_loss=True, kmix=True)),
    ]


def config_hash(cfg: TrainConfig) -> str:
    """Short stable digest of the full resolved config."""
    return hashlib.sha256(repr(cfg).encode("utf-8")).hexdigest()[:16]


@dataclass
class AblationRow:
    name: str
    config_hash: str
    accuracy: float
    n_test: int


def ablation_machine_line(row: AblationRow) -> str:
    return f"config={row.config_hash} acc={row.accuracy!r} n_test={row.n_test}"


def format_ablation_table(rows) -> str:
    name_w = max(len("config"), *(len(r.name) for r in rows))
    lines = [f"{'config':<{name_w}}  {'hash':<16}  {'accuracy':>8}  {'n_test':>6}"]
    for r in rows:
        lines.append(f"{r.name:<{name_w}}  {r.config_hash:<16}  "
                     f"{r.accuracy:>8.4f}  {r.n_test:>6d}")
    return "\n".join(lines)


def run_rung(name: str, cfg: TrainConfig, train_specs, probe_pairs,
             on_epoch=None) -> AblationRow:
    """Pretrain one ladder rung and probe the resulting student."""
    ckpt = pretrain(train_specs, cfg, on_epoch=on_epoch)
    emb, labels = embed_dataset(ckpt.student_params(), probe_pairs)
    probe = linear_probe(emb, labels, derive_seed(cfg.seed, "probe-split"))
    return AblationRow(name=name, config_hash=config_hash(cfg),
                       accuracy=probe.accuracy, n_test=probe.n_test)


def ablation_report(train_specs, probe_pairs, ladder, on_row=None):
    """Run every rung in order; ``on_row`` sees each row as soon as it exists."""
    rows = []
    for name, cfg in ladder:
        row = run_rung(name, cfg, train_specs, probe_pairs)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows
