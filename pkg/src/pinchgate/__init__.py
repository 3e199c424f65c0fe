"""One-pass joint pruning and training of transformer encoders with
layer-level self-pinching gates, plus the magnitude, mixed-sparsity and
Gumbel-softmax channel-search baselines it is compared against."""

__version__ = "0.1.0"
