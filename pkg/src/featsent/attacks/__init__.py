from .adaptive import adaptive_pgd_alternating, adaptive_pgd_combined, combined_direction
from .crafting import (
    ATTACKS,
    DEFAULTS,
    AdversarialSet,
    AttackSpec,
    craft_dataset,
    load_adversarial_set,
    save_adversarial_set,
)
from .gradient import apgd, dlr_loss, fgsm, pgd, project_linf
from .minimal import deepfool, jsma, saliency_map
from .optimization import cw_l2, ead, soft_threshold

__all__ = [
    "ATTACKS",
    "DEFAULTS",
    "AdversarialSet",
    "AttackSpec",
    "adaptive_pgd_alternating",
    "adaptive_pgd_combined",
    "apgd",
    "combined_direction",
    "craft_dataset",
    "cw_l2",
    "deepfool",
    "dlr_loss",
    "ead",
    "fgsm",
    "jsma",
    "load_adversarial_set",
    "pgd",
    "project_linf",
    "saliency_map",
    "save_adversarial_set",
    "soft_threshold",
]
