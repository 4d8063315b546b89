"""
Distance and angle outlier scores on window averages
====================================================

The comparison detectors do not see the time axis.  Each 128-step window
is collapsed to its per-feature mean, and the resulting vectors are
scored by k-nearest-neighbour distance, by the angle-based outlier
factor, and by a small dense autoencoder.
"""

import numpy as np

from convae.baselines import Detector, feature_matrix, score_cycles
from convae.data import normalize, sample_windows, split_dataset
from convae.evaluation import calibrate_threshold, classify_and_report
from convae.synth import SynthConfig, generate_synthetic

cycles = [normalize(c) for c in generate_synthetic(SynthConfig(seed=5, n_healthy=15, n_faulted=5))]
train_c, val_c, test_c = split_dataset(cycles, seed=5, validation_fraction=1 / 3)

# 64 random windows per training cycle give the reference point cloud.
rng = np.random.default_rng(0)
X = feature_matrix([w for c in train_c for w in sample_windows(c, count=64, rng=rng)])
print("training vectors:", X.shape)

for method in ("knn", "abod", "dense-ae"):
    det = Detector(method, epochs=30).fit(X)
    _, val = score_cycles(det, val_c)
    _, test = score_cycles(det, test_c)
    # ABOD marks outliers with *low* scores, so its threshold sits below the healthy minimum.
    th = calibrate_threshold(val, "max-margin", 1.05, orientation=det.orientation)
    m = classify_and_report(val + test, th)
    print(f"{method:8s} ({det.orientation} is outlier)  accuracy {m.accuracy:.2f}  recall {m.recall:.2f}  f1 {m.f1:.2f}")
