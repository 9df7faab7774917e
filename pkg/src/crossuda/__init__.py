"""Cross-modality unsupervised domain adaptation for volumetric segmentation:
segmentation-enhanced contrastive translation, intensity augmentation with
ensemble pseudo-labels, and a multi-scale mean teacher."""

__version__ = "0.1.0"
