"""Shape walkthrough of the dialogue model, small enough to run instantly,
with the published-scale arithmetic printed alongside.

Pipeline per speaker: five streams -> project to d -> per-stream encoder ->
group concat (audio 2d, video 3d) -> group encoders. Then the partner's
fused features query the target's (cross-attention), the two groups concat
to 5d, and an MLP emits one engagement value per frame.
"""

import numpy as np

from engagekit.model import (ModelConfig, EngagementModel, param_count,
                             STREAMS, DEFAULT_FEATURE_DIMS)

# Published preset: d=512, window 96 = 32 core + 32 context per side.
paper = ModelConfig()
print("published-scale widths:")
print(f"  input streams: {DEFAULT_FEATURE_DIMS} "
      f"(total {sum(DEFAULT_FEATURE_DIMS.values())})")
print(f"  window length {paper.window_len}, unified dim {paper.model_dim}")
print(f"  audio group 2d = {paper.audio_dim}, video group 3d = {paper.video_dim}, "
      f"head input 5d = {paper.head_in_dim}")
print(f"  parameters: {param_count(paper) / 1e6:.1f}M")

# The same architecture at desk scale actually runs here.
cfg = ModelConfig(model_dim=32, heads=8, dropout=0.0, core_len=8, context_len=4)
model = EngagementModel(cfg, seed=0)
rng = np.random.default_rng(0)
bundle = lambda: {s: rng.standard_normal((cfg.window_len, DEFAULT_FEATURE_DIMS[s]))
                  for s in STREAMS}
out = model.forward(bundle(), bundle())
print(f"\ndesk-scale forward: window {cfg.window_len} -> output {out.shape} "
      f"in [{out.data.min():.3f}, {out.data.max():.3f}] (clamped in eval mode)")

# Ablation flags strip the graph down; parameter counts shrink accordingly.
for name, flags in [("full", {}),
                    ("no group fusion", {"use_group_fusion": False}),
                    ("no partner cross", {"use_partner_cross": False}),
                    ("neither", {"use_group_fusion": False, "use_partner_cross": False})]:
    variant = ModelConfig(model_dim=32, heads=8, core_len=8, context_len=4, **flags)
    print(f"  {name:18s} {param_count(variant):>9,} parameters")
