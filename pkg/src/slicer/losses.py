"""Contrastive objectives over student and momentum-teacher embeddings.

Instance loss: temperature-scaled InfoNCE where row i of the anchor matrix
must pick out row i of the target matrix against negatives drawn from the
other target rows. The symmetric form runs it in both view directions
(student view A vs teacher view B, plus student view B vs teacher view A) and
sums. The cluster loss applies the same contrast to the *columns* of the two
student matrices after a row softmax, so embedding dimensions act as soft
cluster assignments and each cluster column must align across views.

Gradients flow only through tensors recorded on a tape; teacher embeddings
are produced tapeless, which is the stop-gradient in this scheme. All
softmaxes subtract the row max, so losses stay finite for the magnitudes the
(default, row-normalized) configs produce.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, concat, gather_rows, log, matmul, mean, mul,
                     reshape, scale, softmax, tensor_sum, transpose)


@dataclass
class ContrastiveConfig:
    tau: float = 0.1                    # similarity temperature
    num_negatives: "int | str" = "all"  # "all" (= N-1) or an explicit count
    symmetric: bool = True              # instance loss in both view directions
    cluster_softmax: bool = True        # row softmax before the cluster contrast
    normalize_rows: bool = True         # l2-normalize instance embeddings
    normalize_cols: bool = True         # l2-normalize cluster columns
    w_instance: float = 1.0
    w_cluster: float = 1.0
    entropy_weight: float = 0.0         # optional anti-collapse regularizer

    def validate(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        k = self.num_negatives
        if k != "all" and (not isinstance(k, int) or k < 1):
            raise ValueError(f'num_negatives must be "all" or a positive int, got {k!r}')
        for name in ("w_instance", "w_cluster", "entropy_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _check_pair(name, a, b, min_rows):
    if a.data.ndim != 2 or a.data.shape != b.data.shape:
        raise ValueError(
            f"{name}: expected matching 2-d embedding matrices, got "
            f"{a.data.shape} vs {b.data.shape}")
    if a.data.shape[0] < min_rows:
        raise ValueError(
            f"{name}: need at least {min_rows} rows, got {a.data.shape[0]}")


def _l2norm_rows(x):
    from .tensor import l2_normalize
    return l2_normalize(x, axis=1)


def _neg_log_column(probs, col, n_cols):
    # -mean(log probs[:, col]) using a constant one-hot mask; keeps everything
    # inside recorded primitives so the backward pass needs no special cases
    mask = np.zeros((probs.data.shape[0], n_cols))
    mask[:, col] = 1.0
    picked = tensor_sum(mul(probs, Tensor(mask)), axis=1)
    return scale(mean(log(picked)), -1.0)


def _info_nce_core(anchor, target, tau, num_negatives, normalize):
    """Mean over rows of -log softmax(sim/tau) at the matched row."""
    n = anchor.data.shape[0]
    if normalize:
        anchor = _l2norm_rows(anchor)
        target = _l2norm_rows(target)
    k = n - 1 if num_negatives == "all" else num_negatives
    if not 1 <= k <= n - 1:
        raise ValueError(f"num_negatives must be in [1, {n - 1}], got {k}")
    if k == n - 1:
        sims = scale(matmul(anchor, transpose(target)), 1.0 / tau)
        probs = softmax(sims, axis=1)
        # matched entries live on the diagonal
        eye = np.eye(n)
        picked = tensor_sum(mul(probs, Tensor(eye)), axis=1)
        return scale(mean(log(picked)), -1.0)
    # explicit-K path: negatives are the next k rows cyclically
    cols = [reshape(tensor_sum(mul(anchor, target), axis=1), (n, 1))]
    for shift in range(1, k + 1):
        rolled = gather_rows(target, (np.arange(n) + shift) % n)
        cols.append(reshape(tensor_sum(mul(anchor, rolled), axis=1), (n, 1)))
    sims = scale(concat(cols, axis=1), 1.0 / tau)
    return _neg_log_column(softmax(sims, axis=1), 0, k + 1)


def instance_info_nce(anchor: Tensor, target: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """One-directional instance contrast; anchor row i vs target rows."""
    cfg.validate()
    _check_pair("instance_info_nce", anchor, target, min_rows=2)
    return _info_nce_core(anchor, target, cfg.tau, cfg.num_negatives,
                          cfg.normalize_rows)


def symmetric_instance_loss(student_a: Tensor, student_b: Tensor,
                            teacher_a: Tensor, teacher_b: Tensor,
                            cfg: ContrastiveConfig) -> Tensor:
    """Cross-view sum: contrast(student A, teacher B) + contrast(student B, teacher A)."""
    return add(instance_info_nce(student_a, teacher_b, cfg),
               instance_info_nce(student_b, teacher_a, cfg))


def cluster_contrastive_loss(student_a: Tensor, student_b: Tensor,
                             cfg: ContrastiveConfig) -> Tensor:
    """Column contrast between the two student views.

    Rows are (optionally) softmaxed into soft cluster assignments, then the
    transposed matrices go through the same InfoNCE core: column c of view A
    must match column c of view B against all other columns.
    """
    cfg.validate()
    _check_pair("cluster_contrastive_loss", student_a, student_b, min_rows=1)
    if student_a.data.shape[1] < 2:
        raise ValueError("cluster_contrastive_loss: need at least 2 embedding dims")
    a, b = student_a, student_b
    if cfg.cluster_softmax:
        a = softmax(a, axis=1)
        b = softmax(b, axis=1)
    return _info_nce_core(transpose(a), transpose(b), cfg.tau, "all",
                          cfg.normalize_cols)


def assignment_entropy_gap(student_a: Tensor, student_b: Tensor) -> Tensor:
    """KL(mean soft assignment || uniform); zero iff usage is perfectly even.

    Optional regularizer against all rows collapsing onto one dimension.
    """
    n_dims = student_a.data.shape[1]
    probs = softmax(concat([student_a, student_b], axis=0), axis=1)
    avg = mean(probs, axis=0)
    return add(tensor_sum(mul(avg, log(avg))), Tensor(np.log(n_dims)))


def total_loss(student_a: Tensor, student_b: Tensor, teacher_a: Tensor,
               teacher_b: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """Weighted sum of the enabled terms; a zero weight skips its term entirely."""
    cfg.validate()
    terms = []
    if cfg.w_instance != 0.0:
        if cfg.symmetric:
            inst = symmetric_instance_loss(student_a, student_b,
                                           teacher_a, teacher_b, cfg)
        else:
            inst = instance_info_nce(student_a, teacher_b, cfg)
        terms.append(scale(inst, cfg.w_instance))
    if cfg.w_cluster != 0.0:
        terms.append(scale(cluster_contrastive_loss(student_a, student_b, cfg),
                           cfg.w_cluster))
    if cfg.entropy_weight != 0.0:
        terms.append(scale(assignment_entropy_gap(student_a, student_b),
                           cfg.entropy_weight))
    if not terms:
        raise ValueError("total_loss: every loss term is disabled")
    out = terms[0]
    for term in terms[1:]:
        out = add(out, term)
    return out
