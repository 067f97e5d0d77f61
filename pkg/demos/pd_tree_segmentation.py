"""Train a small pd-tree network on barbells and compare it to a constant guess.

Run with ``python3 demos/pd_tree_segmentation.py`` (a few seconds).
"""
import numpy as np

from psfseg import tensor as T
from psfseg.data import generate_synthetic, normalize_unit_ball
from psfseg.harness import constant_miou, majority_labels
from psfseg.metrics import shape_miou
from psfseg.pdnet import PdNetConfig, TrainSettings, predict_ensemble, sample_tree, train_pdnet

train = generate_synthetic("barbell", 60, 512, T.make_rng(0, "data:train:barbell"))
test = generate_synthetic("barbell", 20, 512, T.make_rng(0, "data:test:barbell"))

# Each training shape gets a fresh randomized tree per step. Split normals are
# the dominant axes of small random point subsets, so trees differ each draw.
cfg = PdNetConfig.desk()
pc = normalize_unit_ball(train.shapes[0])
tree, _ = sample_tree(pc, cfg, np.random.default_rng(0))
print(f"tree over {tree.leaf_count} leaves, root normal {np.round(tree.normals[1], 3)}")

net, log = train_pdnet(train, cfg, TrainSettings(epochs=4, batch_size=8, lr=3e-3), T.make_rng(0, "sampling"))
for rec in log:
    print(f"epoch {rec['epoch']}  loss {rec['loss']:.3f}  train mIoU {rec['train_miou']:.3f}")

# Test time averages the posteriors of several trees per shape.
scores = [
    shape_miou(predict_ensemble(pc, net, T.make_rng(0, f"trees:{i}")).argmax(1), pc.labels, 3)
    for i, pc in enumerate(test.shapes)
]
major = majority_labels(train)["barbell"]
base = [constant_miou(pc.labels, major, 3) for pc in test.shapes]
print(f"test mIoU {np.mean(scores):.3f} with a {cfg.ensemble}-tree ensemble; constant part {major} gives {np.mean(base):.3f}")
