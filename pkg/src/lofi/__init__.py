"""Fine-grained image-text representations on synthetic scans: sigmoid
contrastive pretraining with captioning and grounding objectives, and
retrieval-based in-context grounding."""

__version__ = "0.1.0"
VERSION_TAG = f"lofi-{__version__}"
