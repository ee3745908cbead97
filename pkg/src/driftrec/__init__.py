"""Temporal VAE recommender with a sparse gated decode structure.

Subpackages cover the full pipeline: interaction ingestion and
environment slicing (`dataio`), the recommender networks (`model`),
the multi-objective loss (`objective`), training (`trainer`),
deterministic ranking and interventions (`inference`), metrics and
shift analysis (`evaluation`), a synthetic benchmark generator
(`synthgen`), and a command-line front end (`cli`). Everything runs
on the in-package reverse-mode engine (`autodiff`).
"""

__version__ = "0.1.0"
