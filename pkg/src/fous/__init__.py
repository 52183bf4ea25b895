"""Unsupervised domain-adaptive person search at desk scale.

Prototype pseudo-labelling replaces clustering on the target domain, an
attention block refines instance features, and adversarial heads align the
two domains.
"""

from fous.config import RunConfig, load_config
from fous.data import generate_synthetic_domain_pair
from fous.training import train_adaptation

__all__ = ["RunConfig", "load_config", "generate_synthetic_domain_pair", "train_adaptation"]
__version__ = "0.1.0"
