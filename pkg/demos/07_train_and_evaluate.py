"""End-to-end miniature: synthesize a corpus, train the dialogue model for a
couple of minutes of CPU time, evaluate with EMA weights, stitch a full
prediction series. The `engagekit` CLI wraps exactly this flow."""

import numpy as np

from engagekit.data import SynthConfig, synth_session
from engagekit.metrics import ccc, evaluate_sessions, predict_session
from engagekit.model import ModelConfig, EngagementModel
from engagekit.training import TrainConfig, train

# One seed, disjoint session indices: train and validation share the same
# latent-to-feature readouts, so generalization is measurable.
synth = SynthConfig(sessions=1, num_frames=1200, seed=11)
train_sessions = [synth_session(synth, i) for i in range(3)]
val_sessions = [synth_session(synth, 3)]

model_cfg = ModelConfig(model_dim=32, heads=8, dropout=0.1,
                        core_len=32, context_len=16, dtype="float32")
model = EngagementModel(model_cfg, seed=0)
print(f"model: {model.num_parameters():,} parameters, "
      f"window {model_cfg.window_len} frames")

train_cfg = TrainConfig(lr=1e-3, batch_size=16, epochs=10, ema_decay=0.9, seed=0)
result = train(model, train_sessions, val_sessions, train_cfg)

report = evaluate_sessions(model, val_sessions)
print(f"\nheld-out session CCC (raw weights): {report.mean_ccc:.4f}")

series = predict_session(model, val_sessions[0])
labels = val_sessions[0].roles["target"].labels
print(f"prediction series: {series.shape[0]} frames, "
      f"range [{series.min():.3f}, {series.max():.3f}], "
      f"ccc vs labels {ccc(series, labels):.4f}")
print("first frames:", np.round(series[:8], 3), "...")
print("labels:       ", np.round(labels[:8].astype(float), 3), "...")
