"""From raw waveforms to the log-mel spectrograms every other stage consumes.

Synthesizes one clip per class, walks it through STFT -> mel filterbank ->
log compression, and round-trips the result through an SMF1 file.
"""
import tempfile
from pathlib import Path

import numpy as np

from slicer.audio import (CLASS_NAMES, read_smf1, stft, synth_corpus,
                          waveform_to_logmel, write_smf1)


def main():
    corpus = synth_corpus(n_per_class=1, seed=0, clip_seconds=1.0)
    print(f"synthesized {len(corpus)} clips, one per class: {CLASS_NAMES}")

    wave, label = corpus[0]
    mags = stft(wave)
    print(f"\nclass '{CLASS_NAMES[label]}': {wave.samples.size} samples "
          f"at {wave.sample_rate} Hz")
    print(f"  STFT magnitudes: {mags.shape} (freq bins x frames)")

    for wave, label in corpus:
        spec = waveform_to_logmel(wave)
        peak_row = int(np.argmax(spec.mean(axis=1)))
        print(f"  {CLASS_NAMES[label]:<10} log-mel {spec.shape}  "
              f"range [{spec.min():.2f}, {spec.max():.2f}]  "
              f"loudest mel row {peak_row}")

    spec = waveform_to_logmel(corpus[0][0])
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tone.smf"
        write_smf1(path, spec)
        back = read_smf1(path)
        print(f"\nSMF1 round trip: {path.stat().st_size} bytes, "
              f"bitwise equal: {np.array_equal(spec, back)}")


if __name__ == "__main__":
    main()
