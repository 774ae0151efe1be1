"""A complete pretraining run, shrunk until it finishes in about a minute.

48 quarter-second clips, two epochs, every mechanism live: k-means fit,
queue, k-mix mixup, random resized crops, symmetric + cluster losses, Adam
on the student, EMA on the teacher. Ends with checkpoint save/load/resume,
showing the resumed run lands exactly where the uninterrupted one did.
"""
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from slicer.audio import corpus_spectrograms, synth_corpus
from slicer.training import (TrainConfig, checkpoint_load, checkpoint_save,
                             pretrain)

CFG = TrainConfig(batch_size=8, epochs=2, seed=3, embed_dim=16, hidden=32,
                  kmeans_k=4, kmix_r=4, queue_capacity=16,
                  kmeans_fraction=1.0)


def main():
    corpus = synth_corpus(n_per_class=12, seed=3, clip_seconds=0.25)
    specs = [s for s, _ in corpus_spectrograms(corpus)]
    print(f"corpus: {len(specs)} spectrograms of shape {specs[0].shape}")

    print(f"\npretraining {CFG.epochs} epochs, batch {CFG.batch_size}:")
    ckpt = pretrain(specs, CFG, on_epoch=lambda line: print(" ", line))
    norms = {n: float(np.linalg.norm(a)) for n, a in ckpt.student.items()}
    print("student parameter norms:",
          ", ".join(f"{n}={v:.2f}" for n, v in sorted(norms.items())[:4]), "...")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "run.slk"
        checkpoint_save(ckpt, path)
        loaded = checkpoint_load(path)
        same = all(np.array_equal(loaded.student[n], ckpt.student[n])
                   for n in ckpt.student)
        print(f"\ncheckpoint: {path.stat().st_size} bytes, "
              f"weights restored bitwise: {same}")

        # interrupt after one epoch, resume, and compare against the 2-epoch run
        mid = pretrain(specs, replace(CFG, epochs=1))
        checkpoint_save(mid, path)
        print("\nresuming from an epoch-1 checkpoint:")
        resumed = pretrain(specs, CFG, resume=checkpoint_load(path),
                           on_epoch=lambda line: print(" ", line))
        match = all(np.array_equal(resumed.student[n], ckpt.student[n])
                    for n in ckpt.student)
        print(f"resumed weights match the uninterrupted run bitwise: {match}")


if __name__ == "__main__":
    main()
