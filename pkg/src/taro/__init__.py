"""Taxonomy-aware open-world detection heads, losses and metrics in numpy."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .hierhead import classification_loss, hier_activation, hier_activation_backward
from .matching import Box, giou, hungarian, iou, match_cost
from .owod_eval import EvalReport, evaluate
from .relabel import objectness_target, relabel
from .sparsemax import sparsemax, sparsemax_loss, sparsemax_loss_grad, softmax_kl_loss
from .taxonomy import TaxonomyForest, ancestors, load_taxonomy, multi_hot_target, parse_taxonomy

__all__ = [
    "__version__",
    "TaxonomyForest", "parse_taxonomy", "load_taxonomy", "ancestors", "multi_hot_target",
    "sparsemax", "sparsemax_loss", "sparsemax_loss_grad", "softmax_kl_loss",
    "hier_activation", "hier_activation_backward", "classification_loss",
    "Box", "iou", "giou", "match_cost", "hungarian",
    "relabel", "objectness_target",
    "EvalReport", "evaluate",
]
