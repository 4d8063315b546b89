"""Fully convolutional autoencoder for anomaly detection in drive-cycle data.

Modules
-------
tensor      float tensors, reverse-mode gradient tape, conv and transposed conv
data        drive cycles, normalization, window sampling, batches, CSV datasets
synth       seeded synthetic healthy and faulted drive cycles
model       architecture descriptor, staged encoder/decoder, weight transfer
checkpoint  versioned binary checkpoints
training    cost J, Adam, staged training loop
evaluation  scoring, thresholds, metrics, reports
baselines   ABOD, KNN and dense-autoencoder comparison detectors
cli         ``convae`` command-line interface
"""

__version__ = "0.1.0"
