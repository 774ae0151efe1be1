"""Deterministic per-subsystem seed derivation.

Every stochastic subsystem (corpus synthesis, k-means, parameter init, epoch
shuffling, augmentation, probe splits) gets its own stream derived from the
single root seed, so reordering or disabling one subsystem never perturbs the
draws of another.
"""

import hashlib


def derive_seed(root: int, label: str) -> int:
    """Stable 64-bit stream seed: sha256 of "<root>:<label>", low 8 bytes LE."""
    digest = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
