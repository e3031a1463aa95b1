"""Walk through the front end on a few synthetic cells.

Run:  python3 demos/front_end.py
"""
# %% a handful of generated cells, both classes
import numpy as np

from sdct_auxnet.data import SyntheticConfig, synthesize
from sdct_auxnet.nn import Tensor
from sdct_auxnet.sdct import dct2, dct_layer_forward, gini, init_stain_weights, rgb_to_od, sd_forward, sparsity_stats

cfg = SyntheticConfig(train_subjects_per_class=2, test_subjects_per_class=1, images_per_subject=8)
records, images = synthesize(cfg)
labels = np.array([r.label for r in records])
print(f"{len(images)} images of shape {images.shape[1:]}, {labels.sum()} textured (class 1)")

# %% optical density: 0 for white light, log10(256) for a black pixel
od = rgb_to_od(images[:1])
print("OD range on the first image:", od.min().round(3), od.max().round(3))

# %% stain deconvolution starts near the identity, so the SD output is close to the OD input
w = init_stain_weights(np.random.default_rng(0))
sd = sd_forward(Tensor(od), w)
print("max |SD - OD|:", float(np.abs(sd.data - od).max().round(4)))

# %% the DCT layer compresses coefficient magnitudes with log10(1 + |c|)
d = dct_layer_forward(sd)
print("DCT-layer output, DC term per channel:", d.data[0, :, 0, 0].round(3))

# %% smooth cells put more energy into few coefficients than textured ones
rep = sparsity_stats(list(images), labels.tolist())
for c in (0, 1):
    print(f"class {c}: top-5% energy {rep.class_mean(c):.3f}   gini {rep.class_mean(c, 'gini'):.3f}")

# %% the same contrast on a single pair, coefficient by coefficient
smooth, textured = images[labels == 0][0], images[labels == 1][0]
for name, img in (("smooth", smooth), ("textured", textured)):
    coeffs = np.abs(dct2(rgb_to_od(img)))
    print(f"{name:>8}: gini of |DCT| = {gini(coeffs):.3f}")
