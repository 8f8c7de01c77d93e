"""
Signed distance maps of synthetic masks
=======================================

The boundary-aware contrast compares teacher and student through signed
distance maps: negative inside the mask, zero on its boundary, positive
outside, scaled to [-1, 1].
"""

import matplotlib.pyplot as plt

from cmaformer.contrast import signed_distance_map
from cmaformer.data import TUMOR, make_sample

# %%
# One 64x64 sample: an elliptical organ with one or two small tumors.
sample = make_sample(64, 64, seed=0, index=3)
organ = sample.label > 0
tumor = sample.label == TUMOR
print("tumor pixels:", int(tumor.sum()), "of", tumor.size)

# %%
# The tumor map is dominated by positive distances, since the object is
# small. This is the long-tail case the contrast term is meant to help.
fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
axes[0].imshow(sample.image[0], cmap="gray")
axes[0].set_title("image")
for ax, mask, name in zip(axes[1:], (organ, tumor), ("organ", "tumor")):
    im = ax.imshow(signed_distance_map(mask), cmap="RdBu", vmin=-1, vmax=1)
    ax.contour(mask, levels=[0.5], colors="k", linewidths=0.6)
    ax.set_title(f"{name} SDM")
fig.colorbar(im, ax=axes[1:])
plt.show()
