"""Multi-task attentive graph convolution recommender for implicit feedback."""

__version__ = "1.0.0"
