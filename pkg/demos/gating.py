"""Train a tiny 7-member ensemble and watch the confidence gate at work.

Takes about half a minute on one core.  Run:  python3 demos/gating.py
"""
# %% data: 7 subjects per class for training, 2 per class held out
import numpy as np

from sdct_auxnet.backbone import BackboneConfig
from sdct_auxnet.data import SyntheticConfig, synthesize
from sdct_auxnet.metrics import weighted_f1
from sdct_auxnet.pipeline import DEFAULT_THETAS, DESK_SCALE, TrainConfig, cross_validate, majority_vote

cfg = SyntheticConfig(train_subjects_per_class=7, test_subjects_per_class=2, images_per_subject=10)
records, images = synthesize(cfg)
train = np.array([r.split == "train" for r in records])
labels = np.array([r.label for r in records])
subjects = [r.subject_id for r in records]

# %% two-step training per fold: the network first, then an RBF-SVM on its spectral-averaged features
config = TrainConfig(**{**DESK_SCALE, "epochs": 2, "lr_drop_epochs": ()})
result = cross_validate(
    images[train], labels[train], [s for s, t in zip(subjects, train) if t],
    images[~train], labels[~train], config, theta=0.9, k=7, backbone=BackboneConfig(input_side=cfg.side),
)
for m, hist in enumerate(result.histories, start=1):
    print(f"Model{m}: final train acc {hist[-1].train_acc:.3f}, val acc {hist[-1].val_acc:.3f}")

# %% the gate: keep the network's label when its top probability exceeds theta, else ask the SVM
o = result.test_outputs[0]
print("Model1 tau quantiles:", np.quantile(o.tau, [0, 0.5, 1]).round(4))

# %% outputs are cached, so sweeping theta costs no further forward passes
truth = result.test_labels
print("theta   routed-to-SVM per model        voted WF1")
for theta in DEFAULT_THETAS:
    preds = [out.gate(theta) for out in result.test_outputs]
    routed = [int(out.routed(theta).sum()) for out in result.test_outputs]
    print(f"{theta:5.2f}   {routed}   {weighted_f1(majority_vote(np.stack(preds)), truth):.3f}")
