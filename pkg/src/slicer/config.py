"""Keyed text run configuration: `key = value`, one per line.

Unknown keys are rejected by name. Every run writes its fully resolved
configuration (all defaults expanded, annotated with help text) next to its
outputs, and that file can be fed back via --config for a bitwise rerun.
Defaults carrying the method's standard settings are marked "(method
default)" in the annotations; the batch/epoch sizing is deliberately
desk-scale (the full-scale recipe trains batch 1024 for 100 epochs).
"""

from dataclasses import dataclass

from .augment import AugmentConfig
from .losses import ContrastiveConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration; ``key`` names the offending key when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class Key:
    name: str
    kind: str         # int | float | bool | str | int_or_all
    default: object
    help: str
    method: bool = False


KEYS = [
    # randomness
    Key("seed", "int", 0, "root seed; every subsystem derives its own stream"),
    # corpus synthesis
    Key("corpus_clips_per_class", "int", 500, "pretraining clips per class (4 classes)"),
    Key("probe_clips_per_class", "int", 100, "held-out probe clips per class"),
    Key("sample_rate", "int", 16000, "waveform sample rate in Hz", method=True),
    Key("clip_seconds", "float", 1.0, "length of each synthetic clip"),
    Key("stft_window", "int", 1024, "analysis window size (power of two)", method=True),
    Key("stft_hop", "int", 160, "hop size in samples (10 ms at 16 kHz)", method=True),
    Key("n_mels", "int", 128, "mel filterbank size", method=True),
    # encoder
    Key("embed_dim", "int", 256, "embedding width C", method=True),
    Key("hidden", "int", 512, "hidden width of the projection layer"),
    # optimization
    Key("batch_size", "int", 64, "samples per step (desk-scale; full recipe uses 1024)"),
    Key("epochs", "int", 30, "pretraining epochs (desk-scale; full recipe uses 100)"),
    Key("lr", "float", 3e-4, "Adam learning rate", method=True),
    Key("adam_beta1", "float", 0.9, "Adam first-moment decay"),
    Key("adam_beta2", "float", 0.999, "Adam second-moment decay"),
    Key("adam_eps", "float", 1e-8, "Adam denominator epsilon"),
    Key("ema_momentum", "float", 0.99, "teacher EMA momentum m"),
    # cluster-guided mixing
    Key("kmeans_k", "int", 128, "number of k-means centroids", method=True),
    Key("kmix_r", "int", 128, "top-r window for counterpart sampling", method=True),
    Key("queue_capacity", "int", 2048, "mixing queue capacity", method=True),
    Key("kmeans_fraction", "float", 0.1, "fraction of the corpus used to fit k-means",
        method=True),
    Key("kmeans_max_iters", "int", 100, "Lloyd iteration cap"),
    # augmentation
    Key("alpha", "float", 0.2, "mixup strength upper bound", method=True),
    Key("rrc_freq_lo", "float", 0.6, "crop scale range, frequency axis, low"),
    Key("rrc_freq_hi", "float", 1.5, "crop scale range, frequency axis, high"),
    Key("rrc_time_lo", "float", 0.6, "crop scale range, time axis, low"),
    Key("rrc_time_hi", "float", 1.5, "crop scale range, time axis, high"),
    Key("rrc_centered", "bool", False, "pin crop placement to center (debug/identity)"),
    # ablation switches
    Key("symmetric", "bool", True, "contrast in both view directions"),
    Key("cluster_loss", "bool", True, "enable the column-contrastive term"),
    Key("kmix", "bool", True, "cluster-guided counterpart sampling"),
    # loss
    Key("tau", "float", 0.1, "softmax temperature", method=True),
    Key("num_negatives", "int_or_all", "all", 'negatives per anchor ("all" = N-1)'),
    Key("cluster_softmax", "bool", True, "row softmax before the cluster contrast"),
    Key("normalize_rows", "bool", True, "l2-normalize instance embeddings"),
    Key("normalize_cols", "bool", True, "l2-normalize cluster columns"),
    Key("w_instance", "float", 1.0, "instance loss weight"),
    Key("w_cluster", "float", 1.0, "cluster loss weight"),
    Key("entropy_weight", "float", 0.0, "optional anti-collapse regularizer weight"),
    # probe
    Key("probe_lr", "float", 1e-2, "linear probe Adam learning rate"),
    Key("probe_max_epochs", "int", 500, "linear probe epoch cap"),
    Key("probe_patience", "int", 10, "probe early-stopping patience"),
    # paths ("" means: derive from out_dir)
    Key("out_dir", "str", "runs/run", "directory for outputs and the resolved config"),
    Key("corpus_cache_dir", "str", "", "optional SMF1 cache for the synthetic corpus"),
    Key("checkpoint_path", "str", "", "SLK1 checkpoint path (default <out_dir>/checkpoint.slk)"),
    Key("kmeans_path", "str", "", "KMC1 centroid path (default <out_dir>/kmeans.kmc)"),
    Key("log_path", "str", "", "loss log path (default <out_dir>/loss.log)"),
]

_BY_NAME = {k.name: k for k in KEYS}


def _parse_value(key: Key, text: str):
    text = text.strip()
    try:
        if key.kind == "int":
            return int(text)
        if key.kind == "float":
            return float(text)
        if key.kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError("expected true or false")
        if key.kind == "int_or_all":
            return "all" if text == "all" else int(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for key '{key.name}': {e}", key=key.name) from None


def _format_value(key: Key, value) -> str:
    if key.kind == "bool":
        return "true" if value else "false"
    return str(value) if not isinstance(value, float) else repr(value)


def defaults() -> dict:
    return {k.name: k.default for k in KEYS}


def parse_config_text(text: str, values=None) -> dict:
    values = dict(defaults() if values is None else values)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        name, _, val = line.partition("=")
        name = name.strip()
        if name not in _BY_NAME:
            raise ConfigError(f"line {lineno}: unknown config key '{name}'", key=name)
        values[name] = _parse_value(_BY_NAME[name], val)
    return values


def apply_overrides(values: dict, overrides) -> dict:
    values = dict(values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        name, _, val = item.partition("=")
        name = name.strip()
        if name not in _BY_NAME:
            raise ConfigError(f"unknown config key '{name}'", key=name)
        values[name] = _parse_value(_BY_NAME[name], val)
    return values


def load_config(path, overrides=(), env=None) -> dict:
    """defaults <- config file <- SLICER_SEED <- --set overrides, then validated."""
    values = defaults()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
        values = parse_config_text(text, values)
    if env is None:
        import os
        env = os.environ
    if "SLICER_SEED" in env:
        values["seed"] = _parse_value(_BY_NAME["seed"], env["SLICER_SEED"])
    values = apply_overrides(values, overrides)
    validate_values(values)
    return values


def render_config(values: dict) -> str:
    """Full resolved config with help annotations; parses back to ``values``."""
    lines = ["# resolved run configuration (all keys explicit)"]
    for k in KEYS:
        note = " (method default)" if k.method else ""
        lines.append(f"# {k.help}{note}")
        lines.append(f"{k.name} = {_format_value(k, values[k.name])}")
    return "\n".join(lines) + "\n"


def reference_text() -> str:
    """The generated reference file: every key at its default, documented."""
    return render_config(defaults())


def build_train_config(values: dict) -> TrainConfig:
    contrastive = ContrastiveConfig(
        tau=values["tau"], num_negatives=values["num_negatives"],
        symmetric=values["symmetric"], cluster_softmax=values["cluster_softmax"],
        normalize_rows=values["normalize_rows"], normalize_cols=values["normalize_cols"],
        w_instance=values["w_instance"], w_cluster=values["w_cluster"],
        entropy_weight=values["entropy_weight"])
    augment = AugmentConfig(
        alpha=values["alpha"], r=values["kmix_r"],
        freq_scale=(values["rrc_freq_lo"], values["rrc_freq_hi"]),
        time_scale=(values["rrc_time_lo"], values["rrc_time_hi"]),
        kmix_enabled=values["kmix"], rrc_centered=values["rrc_centered"])
    return TrainConfig(
        batch_size=values["batch_size"], epochs=values["epochs"],
        seed=values["seed"], embed_dim=values["embed_dim"], hidden=values["hidden"],
        kmeans_k=values["kmeans_k"], kmix_r=values["kmix_r"],
        queue_capacity=values["queue_capacity"],
        kmeans_fraction=values["kmeans_fraction"],
        kmeans_max_iters=values["kmeans_max_iters"], lr=values["lr"],
        adam_beta1=values["adam_beta1"], adam_beta2=values["adam_beta2"],
        adam_eps=values["adam_eps"], ema_momentum=values["ema_momentum"],
        symmetric=values["symmetric"], cluster_loss=values["cluster_loss"],
        kmix=values["kmix"], contrastive=contrastive, augment=augment)


def build_augment_config(values: dict) -> AugmentConfig:
    return build_train_config(values).augment_config()


def validate_values(values: dict) -> None:
    """Surface model/training preconditions as ConfigError at parse time."""
    try:
        build_train_config(values).validate()
    except ValueError as e:
        # the first word of every validation message is the field/key name
        key = str(e).split()[0]
        raise ConfigError(str(e), key=key if key in _BY_NAME else None) from None
    for name in ("corpus_clips_per_class", "probe_clips_per_class",
                 "sample_rate", "stft_window", "stft_hop", "n_mels",
                 "probe_max_epochs", "probe_patience"):
        if values[name] < 1:
            raise ConfigError(f"{name} must be >= 1, got {values[name]}", key=name)
    if values["clip_seconds"] <= 0:
        raise ConfigError(f"clip_seconds must be positive, got {values['clip_seconds']}",
                          key="clip_seconds")
    if values["probe_lr"] <= 0:
        raise ConfigError(f"probe_lr must be positive, got {values['probe_lr']}",
                          key="probe_lr")
    if values["n_mels"] != 128:
        raise ConfigError(
            f"n_mels is fixed at 128 (the encoder's frequency dimension), "
            f"got {values['n_mels']}", key="n_mels")
    window = values["stft_window"]
    if window & (window - 1):
        raise ConfigError(f"stft_window must be a power of two, got {window}",
                          key="stft_window")
    if values["sample_rate"] * values["clip_seconds"] < window:
        raise ConfigError("clip_seconds too short for one stft_window",
                          key="clip_seconds")
