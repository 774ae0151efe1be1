"""Self-supervised pretraining loop and SLK1 checkpointing.

One step: augment each spectrogram into two views, embed both views with the
student (on tape) and the teacher (tapeless), take the combined contrastive
loss, Adam-update the student, then move the teacher toward the student by
exponential moving average.

Determinism: every stochastic subsystem draws from its own generator derived
from the root seed (see seeding.py), epochs shuffle with a dedicated
generator, and checkpoints capture parameters, optimizer moments, generator
states, the mixing queue, and the centroid table, so a resumed run reproduces
the original loss log bit for bit.
"""

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import AugmentConfig, MixQueue, make_views
from .clustering import (KMeansModel, assign_centroid, centroid_distance_matrix,
                         kmeans_fit, pool_features)
from .encoder import (EncoderConfig, StudentTeacher, EncoderParams,
                      encoder_forward, ema_update, init_student_teacher)
from .losses import ContrastiveConfig, total_loss
from .seeding import derive_seed
from .tensor import Tape, Tensor, backward

# full-scale reference values; the dataclass defaults are sized for a desk run
PAPER_BATCH_SIZE = 1024
PAPER_EPOCHS = 100


class CheckpointError(ValueError):
    """Malformed SLK1 checkpoint (bad magic/version, truncation, bad sizes)."""


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """Bias-corrected Adam update, in place; a zero gradient leaves its
    parameter bitwise unchanged."""
    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name} shape {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        p.data[...] = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    embed_dim: int = 256
    hidden: int = 512
    kmeans_k: int = 128
    kmix_r: int = 128
    queue_capacity: int = 2048
    kmeans_fraction: float = 0.1
    kmeans_max_iters: int = 100
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_momentum: float = 0.99
    # ablation switches
    symmetric: bool = True
    cluster_loss: bool = True
    kmix: bool = True
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("embed_dim", "hidden", "kmeans_k", "kmix_r",
                     "queue_capacity", "kmeans_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.kmeans_fraction <= 1.0:
            raise ValueError(f"kmeans_fraction must be in (0, 1], got {self.kmeans_fraction}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")
        self.contrastive.validate()
        self.augment.validate()

    def loss_config(self) -> ContrastiveConfig:
        """Contrastive config with the ablation switches folded in."""
        return replace(self.contrastive, symmetric=self.symmetric,
                       w_cluster=self.contrastive.w_cluster if self.cluster_loss else 0.0)

    def augment_config(self) -> AugmentConfig:
        return replace(self.augment, kmix_enabled=self.kmix, r=self.kmix_r)

    def encoder_config(self, input_shape) -> EncoderConfig:
        return EncoderConfig(input_shape=tuple(input_shape),
                             embed_dim=self.embed_dim, hidden=self.hidden)


@dataclass
class TrainState:
    cfg: TrainConfig
    pair: StudentTeacher
    adam: AdamState
    queue: MixQueue
    kmeans: KMeansModel
    dists: np.ndarray
    rng_augment: np.random.Generator
    rng_shuffle: np.random.Generator
    epoch: int = 0


def train_step(state: TrainState, batch_specs) -> float:
    """One optimizer step over a list of spectrograms; returns the loss."""
    if len(batch_specs) < 2:
        raise ValueError(f"a batch needs >= 2 samples, got {len(batch_specs)}")
    cfg = state.cfg
    aug_cfg = cfg.augment_config()
    loss_cfg = cfg.loss_config()
    views_a, views_b = [], []
    for spec in batch_specs:
        centroid = assign_centroid(state.kmeans, pool_features(spec)) \
            if state.kmeans is not None else -1
        va, vb = make_views(spec, state.queue, state.dists, centroid,
                            aug_cfg, state.rng_augment)
        views_a.append(va)
        views_b.append(vb)
    batch_a = np.stack(views_a)
    batch_b = np.stack(views_b)

    student, teacher = state.pair.student, state.pair.teacher
    tape = Tape()
    sa = encoder_forward(student, batch_a, tape)
    # the reverse directions are only needed by the symmetric/cluster terms
    need_sb = loss_cfg.symmetric or loss_cfg.w_cluster != 0.0 \
        or loss_cfg.entropy_weight != 0.0
    sb = encoder_forward(student, batch_b, tape) if need_sb else sa
    ta = encoder_forward(teacher, batch_a) if loss_cfg.symmetric else sa
    tb = encoder_forward(teacher, batch_b)

    loss = total_loss(sa, sb, ta, tb, loss_cfg)
    grad_map = backward(tape, loss)
    grads = {name: grad_map.of(t) for name, t in student.tensors.items()}
    adam_step(state.adam, student.tensors, grads)
    ema_update(state.pair)
    return float(loss.data)


def _fit_corpus_kmeans(specs, cfg: TrainConfig) -> KMeansModel:
    n = len(specs)
    subset_size = int(math.ceil(cfg.kmeans_fraction * n))
    if subset_size < cfg.kmeans_k:
        raise ValueError(
            f"kmeans_fraction of the corpus ({subset_size} samples) is smaller "
            f"than kmeans_k={cfg.kmeans_k}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "kmeans-subset"))
    subset = rng.choice(n, size=subset_size, replace=False)
    pooled = np.stack([pool_features(specs[i]) for i in subset])
    return kmeans_fit(pooled, cfg.kmeans_k, derive_seed(cfg.seed, "kmeans"),
                      max_iters=cfg.kmeans_max_iters)


def _fresh_state(specs, cfg: TrainConfig) -> TrainState:
    kmeans = _fit_corpus_kmeans(specs, cfg) if cfg.kmix else None
    dists = centroid_distance_matrix(kmeans) if kmeans is not None else None
    pair = init_student_teacher(cfg.encoder_config(specs[0].shape),
                                derive_seed(cfg.seed, "init"), cfg.ema_momentum)
    adam = AdamState(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     eps=cfg.adam_eps)
    return TrainState(
        cfg=cfg, pair=pair, adam=adam, queue=MixQueue(cfg.queue_capacity),
        kmeans=kmeans, dists=dists,
        rng_augment=np.random.default_rng(derive_seed(cfg.seed, "augment")),
        rng_shuffle=np.random.default_rng(derive_seed(cfg.seed, "shuffle")))


def loss_log_line(epoch: int, loss: float, lr: float) -> str:
    # repr round-trips float64 exactly, so identical runs emit identical lines
    return f"epoch {epoch} loss {loss!r} lr {lr!r}"


def pretrain(specs, cfg: TrainConfig, resume=None, on_epoch=None,
             config_text: str = "") -> "Checkpoint":
    """Run the pretraining loop over a list of equal-shape spectrograms.

    ``resume`` continues from a Checkpoint (same corpus and config expected);
    ``on_epoch`` receives one loss log line per finished epoch. Returns the
    final Checkpoint. ``epochs=0`` is valid and yields an untrained model.
    """
    cfg.validate()
    if len(specs) < cfg.batch_size:
        raise ValueError(
            f"corpus of {len(specs)} spectrograms is smaller than "
            f"batch_size={cfg.batch_size}")
    shape = specs[0].shape
    for i, s in enumerate(specs):
        if s.shape != shape:
            raise ValueError(
                f"spectrogram {i} has shape {s.shape}, expected {shape}")

    if resume is not None:
        state = _state_from_checkpoint(resume, cfg, shape)
    else:
        state = _fresh_state(specs, cfg)

    n = len(specs)
    for epoch in range(state.epoch, cfg.epochs):
        order = state.rng_shuffle.permutation(n)
        step_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # a trailing singleton cannot form a contrastive pair
            step_losses.append(train_step(state, [specs[i] for i in idx]))
        state.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(loss_log_line(epoch, float(np.mean(step_losses)), cfg.lr))
    return checkpoint_from_state(state, config_text)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    encoder_cfg: EncoderConfig
    ema_momentum: float
    student: dict
    teacher: dict
    adam: AdamState
    kmeans_centroids: "np.ndarray | None"
    queue_capacity: int
    queue_next_counter: int
    queue_specs: list
    queue_centroids: list
    queue_counters: list
    rng_augment_state: dict
    rng_shuffle_state: dict

    def student_params(self) -> EncoderParams:
        return EncoderParams(self.encoder_cfg, {
            name: Tensor(arr.copy(), requires_grad=True)
            for name, arr in self.student.items()})

    def teacher_params(self) -> EncoderParams:
        return EncoderParams(self.encoder_cfg, {
            name: Tensor(arr.copy(), requires_grad=False)
            for name, arr in self.teacher.items()})


def checkpoint_from_state(state: TrainState, config_text: str = "") -> Checkpoint:
    entries = state.queue.entries()
    return Checkpoint(
        config_text=config_text,
        epoch=state.epoch,
        encoder_cfg=state.pair.student.cfg,
        ema_momentum=state.pair.momentum,
        student={k: t.data.copy() for k, t in state.pair.student.tensors.items()},
        teacher={k: t.data.copy() for k, t in state.pair.teacher.tensors.items()},
        adam=AdamState(lr=state.adam.lr, beta1=state.adam.beta1,
                       beta2=state.adam.beta2, eps=state.adam.eps,
                       step_count=state.adam.step_count,
                       m={k: a.copy() for k, a in state.adam.m.items()},
                       v={k: a.copy() for k, a in state.adam.v.items()}),
        kmeans_centroids=None if state.kmeans is None
        else state.kmeans.centroids.copy(),
        queue_capacity=state.queue.capacity,
        queue_next_counter=state.queue.next_counter,
        queue_specs=[spec for spec, _, _ in entries],
        queue_centroids=[c for _, c, _ in entries],
        queue_counters=[cnt for _, _, cnt in entries],
        rng_augment_state=state.rng_augment.bit_generator.state,
        rng_shuffle_state=state.rng_shuffle.bit_generator.state)


def _state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig, shape) -> TrainState:
    expected = cfg.encoder_config(shape)
    if ckpt.encoder_cfg != expected:
        raise CheckpointError(
            f"checkpoint encoder config {ckpt.encoder_cfg} does not match the "
            f"run config / corpus ({expected})")
    if ckpt.epoch > cfg.epochs:
        raise CheckpointError(
            f"checkpoint already has {ckpt.epoch} epochs, config asks for {cfg.epochs}")
    pair = StudentTeacher(ckpt.student_params(), ckpt.teacher_params(),
                          ckpt.ema_momentum)
    adam = AdamState(lr=ckpt.adam.lr, beta1=ckpt.adam.beta1, beta2=ckpt.adam.beta2,
                     eps=ckpt.adam.eps, step_count=ckpt.adam.step_count,
                     m={k: a.copy() for k, a in ckpt.adam.m.items()},
                     v={k: a.copy() for k, a in ckpt.adam.v.items()})
    queue = MixQueue.restore(
        ckpt.queue_capacity,
        zip((s.copy() for s in ckpt.queue_specs), ckpt.queue_centroids,
            ckpt.queue_counters),
        ckpt.queue_next_counter)
    kmeans = None
    dists = None
    if ckpt.kmeans_centroids is not None:
        kmeans = KMeansModel(ckpt.kmeans_centroids.copy())
        dists = centroid_distance_matrix(kmeans)
    rng_augment = np.random.default_rng(0)
    rng_augment.bit_generator.state = ckpt.rng_augment_state
    rng_shuffle = np.random.default_rng(0)
    rng_shuffle.bit_generator.state = ckpt.rng_shuffle_state
    return TrainState(cfg=cfg, pair=pair, adam=adam, queue=queue, kmeans=kmeans,
                      dists=dists, rng_augment=rng_augment,
                      rng_shuffle=rng_shuffle, epoch=ckpt.epoch)


_SLK1_MAGIC = b"SLK1"
_SLK1_VERSION = 1


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    body = struct.pack("<I", len(name_b)) + name_b
    body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    body += arr.tobytes()
    return struct.pack("<I", len(body)) + body


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    records = []
    for group, tensors in (("student", ckpt.student), ("teacher", ckpt.teacher),
                           ("adam/m", ckpt.adam.m), ("adam/v", ckpt.adam.v)):
        for name, arr in tensors.items():
            records.append(_pack_record(f"{group}/{name}", arr))
    if ckpt.kmeans_centroids is not None:
        records.append(_pack_record("kmeans/centroids", ckpt.kmeans_centroids))
    for i, spec in enumerate(ckpt.queue_specs):
        records.append(_pack_record(f"queue/{i}", spec))

    meta = {
        "epoch": ckpt.epoch,
        "encoder": {"input_shape": list(ckpt.encoder_cfg.input_shape),
                    "embed_dim": ckpt.encoder_cfg.embed_dim,
                    "channels": list(ckpt.encoder_cfg.channels),
                    "hidden": ckpt.encoder_cfg.hidden,
                    "conv_stride": ckpt.encoder_cfg.conv_stride},
        "ema_momentum": ckpt.ema_momentum,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "step_count": ckpt.adam.step_count},
        "queue": {"capacity": ckpt.queue_capacity,
                  "next_counter": ckpt.queue_next_counter,
                  "centroids": [int(c) for c in ckpt.queue_centroids],
                  "counters": [int(c) for c in ckpt.queue_counters]},
        "rng": {"augment": ckpt.rng_augment_state,
                "shuffle": ckpt.rng_shuffle_state},
    }
    meta_b = json.dumps(meta).encode("utf-8")
    config_b = ckpt.config_text.encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_SLK1_MAGIC)
        fh.write(struct.pack("<I", _SLK1_VERSION))
        fh.write(struct.pack("<Q", len(config_b)))
        fh.write(config_b)
        fh.write(struct.pack("<I", len(records)))
        for rec in records:
            fh.write(rec)
        fh.write(struct.pack("<Q", len(meta_b)))
        fh.write(meta_b)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != _SLK1_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an SLK1 checkpoint")
    version = r.u32()
    if version != _SLK1_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_text = r.take(r.u64()).decode("utf-8")

    tensors = {}
    for _ in range(r.u32()):
        body_len = r.u32()
        end = r.pos + body_len
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).copy()
        if r.pos != end:
            raise CheckpointError(f"{path}: record {name!r} has inconsistent length")
        tensors[name] = arr

    try:
        meta = json.loads(r.take(r.u64()).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata block: {e}") from None
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")

    student = {n[len("student/"):]: a for n, a in tensors.items()
               if n.startswith("student/")}
    teacher = {n[len("teacher/"):]: a for n, a in tensors.items()
               if n.startswith("teacher/")}
    adam_m = {n[len("adam/m/"):]: a for n, a in tensors.items()
              if n.startswith("adam/m/")}
    adam_v = {n[len("adam/v/"):]: a for n, a in tensors.items()
              if n.startswith("adam/v/")}
    n_queue = len(meta["queue"]["centroids"])
    queue_specs = []
    for i in range(n_queue):
        key = f"queue/{i}"
        if key not in tensors:
            raise CheckpointError(f"{path}: missing queue record {key}")
        queue_specs.append(tensors[key])

    enc = meta["encoder"]
    adam_meta = meta["adam"]
    return Checkpoint(
        config_text=config_text,
        epoch=int(meta["epoch"]),
        encoder_cfg=EncoderConfig(input_shape=tuple(enc["input_shape"]),
                                  embed_dim=int(enc["embed_dim"]),
                                  channels=tuple(enc["channels"]),
                                  hidden=int(enc["hidden"]),
                                  conv_stride=int(enc["conv_stride"])),
        ema_momentum=float(meta["ema_momentum"]),
        student=student, teacher=teacher,
        adam=AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                       beta2=adam_meta["beta2"], eps=adam_meta["eps"],
                       step_count=int(adam_meta["step_count"]),
                       m=adam_m, v=adam_v),
        kmeans_centroids=tensors.get("kmeans/centroids"),
        queue_capacity=int(meta["queue"]["capacity"]),
        queue_next_counter=int(meta["queue"]["next_counter"]),
        queue_specs=queue_specs,
        queue_centroids=[int(c) for c in meta["queue"]["centroids"]],
        queue_counters=[int(c) for c in meta["queue"]["counters"]],
        rng_augment_state=meta["rng"]["augment"],
        rng_shuffle_state=meta["rng"]["shuffle"])
