"""Measure RT60 on synthetic rooms and compare it with the value each room was built with."""

import numpy as np

from vitts.audio import waveform_rt60
from vitts.scenes import RoomSpec, render_sample

rng = np.random.default_rng(0)
print(f"{'target':>7} {'measured':>9}")
for rt60 in (0.2, 0.4, 0.6, 0.8, 1.0):
    s = render_sample(7, RoomSpec(0, rt60), rng)
    print(f"{rt60:>7.2f} {waveform_rt60(s.wet, onset=s.tail_onset):>9.3f}")
