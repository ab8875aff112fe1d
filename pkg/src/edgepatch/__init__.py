"""edgepatch: edge-feature-guided adversarial patches against
visible-infrared person re-identification, with a desk-scale toy
benchmark, a trainable toy victim, and a CMC/mAP evaluation harness."""

__version__ = "0.1.0"
