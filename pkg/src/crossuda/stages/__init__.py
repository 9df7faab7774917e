"""Pipeline stages: translation, augmentation, segmentation, mean teacher, inference."""
