"""Contrastive multi-domain training with a group-fairness regularizer,
plus the synthetic benchmark harness used to study classes that appear
in only one training domain."""

__version__ = "0.1.0"

from . import datagen, evalsel, losses, ndcore, networks, seeding, trainer  # noqa: F401
