"""Synthetic Ukrainian license-plate toolkit.

Modules: grammar (plate codes), render (template raster synthesis), ocr
(template-matching recognizer), diffusion + nn (generative model), metrics
(frechet distance, distribution analytics), pipeline (pseudolabel
expansion), dataset_io (images/labels/manifests), service (review API),
cli (workflow entry point).
"""

__version__ = "0.1.0"
