"""Cross-view matching pipeline: invariant stripe features in kernel space
with marginalized training, a second-order learned metric, and CMC evaluation."""

__version__ = "0.1.0"
