"""Published Dice scores (percent), kept for side-by-side reporting only.

These are never computed here and must not be mixed into measured columns.
"""
from types import MappingProxyType

SYNAPSE_CLASSES = ("average", "aorta", "gallbladder", "kidney_left", "kidney_right",
                   "liver", "pancreas", "spleen", "stomach")
LITS_CLASSES = ("average", "liver", "tumor")

_SYNAPSE = {
    "ViT+CUP": (67.86, 70.19, 45.10, 74.70, 67.40, 91.32, 42.00, 81.75, 70.44),
    "TransUNet": (84.36, 90.68, 71.99, 86.04, 83.71, 95.54, 73.96, 88.80, 84.20),
    "SwinUNet": (79.13, 85.47, 66.53, 83.28, 79.61, 94.29, 56.58, 90.66, 76.60),
    "Swin UNETR": (83.51, 90.75, 66.72, 86.51, 85.88, 95.33, 70.07, 94.59, 78.20),
    "TransClaw U-Net": (78.09, 85.87, 61.38, 84.83, 79.36, 94.28, 57.65, 87.74, 73.55),
    "LeViT-UNet-384s": (78.53, 87.33, 62.23, 84.61, 80.25, 93.11, 59.07, 88.86, 72.76),
    "CoTr": (80.78, 85.42, 68.93, 85.45, 83.62, 93.89, 63.77, 88.58, 76.23),
    "UNETR": (79.56, 89.99, 60.56, 85.66, 84.80, 94.46, 59.25, 87.81, 73.99),
    "nnFormer": (86.57, 92.04, 70.17, 86.57, 86.25, 96.84, 83.35, 90.51, 86.83),
    "CMAformer": (87.39, 93.21, 72.03, 86.55, 86.62, 97.78, 83.81, 92.19, 86.92),
}

_LITS = {
    "ResUnet++": (82.62, 85.83, 79.41),
    "ResT-V2-B": (90.91, 94.88, 86.93),
    "TransUNet": (90.65, 94.56, 86.73),
    "Swin UNETR": (94.41, 97.10, 91.71),
    "nnFormer": (93.10, 96.01, 90.16),
    "CMAformer-SSL": (95.27, 96.32, 94.21),
    "CMAformer": (95.62, 97.89, 93.34),
}


def _table(dataset, rows, classes):
    return {(dataset, model, c): v for model, vals in rows.items() for c, v in zip(classes, vals)}


REFERENCE = MappingProxyType({**_table("synapse", _SYNAPSE, SYNAPSE_CLASSES), **_table("lits", _LITS, LITS_CLASSES)})

# ablation rows keyed by (vit_block, cross_attention, ldc_loss)
ABLATION = MappingProxyType({
    (True, False, False): MappingProxyType({"average": 83.29, "liver": 85.64, "tumor": 80.93}),
    (True, True, False): MappingProxyType({"average": 92.44, "liver": 95.94, "tumor": 88.94}),
    (False, False, True): MappingProxyType({"average": 93.50, "liver": 96.57, "tumor": 90.43}),
    (True, True, True): MappingProxyType({"average": 95.62, "liver": 97.89, "tumor": 94.21}),
})

ABLATION_LABELS = MappingProxyType({
    (True, False, False): "vit only",
    (True, True, False): "vit + cross-attention",
    (False, False, True): "ldc only",
    (True, True, True): "all components",
})


def lookup(dataset, model, cls="average"):
    try:
        return REFERENCE[(dataset, model, cls)]
    except KeyError:
        raise KeyError(f"no reference value for {dataset}/{model}/{cls}") from None


def lits_row(model="CMAformer"):
    return {c: lookup("lits", model, c) for c in LITS_CLASSES}
