"""
Early fusion against geometry only
==================================

Pretrain the 2D network, train an early-fusion model and a geometry-only
model on a small corpus, then thin the validation clouds. Pass an epoch count
on the command line for a longer run (the default is a quick look).
"""

import sys

import numpy as np

from viewfuse.eval import density_robustness, robustness_svg
from viewfuse.net2d import pretrain2d
from viewfuse.pipeline import TrainConfig, train
from viewfuse.pointnet2 import Fusion
from viewfuse.synth import CLASS_NAMES, SynthConfig, generate_corpus

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20
corpus = generate_corpus(SynthConfig(num_train=12, num_val=3))
frames = [f for s in corpus["train"] for f in s.frames]
labels = [lab for s in corpus["train"] for lab in s.labels2d]
net, losses = pretrain2d(np.stack([f.rgb for f in frames]), np.stack(labels), epochs=5)
print(f"2D pretraining: loss {losses[0]:.3f} -> {losses[-1]:.3f}")

cfg = TrainConfig(epochs=epochs, eval_every=epochs)
series = {}
for fusion in (Fusion.EARLY, Fusion.XYZ_ONLY):
    model, rows = train(corpus["train"], corpus["val"], fusion, cfg,
                        net if fusion.needs_lifted else None)
    val = rows[-1]
    print(f"{fusion.value:>6}: val mIoU {val['miou']:.3f}  " + "  ".join(
        f"{n} {v:.2f}" for n, v in zip(CLASS_NAMES, val["ious"])))
    sweep = density_robustness(model, corpus["val"], len(CLASS_NAMES), (1.0, 0.5, 0.25))
    series[fusion.value] = [(r["ratio"], r["miou"]) for r in sweep]
    print("        thinned: " + ", ".join(f"{r:g} -> {m:.3f}" for r, m in series[fusion.value]))

robustness_svg(series, "robustness.svg")
print("wrote robustness.svg")
