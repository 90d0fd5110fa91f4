"""Class-incremental online continual learning with semantically distinct
augmentation (SDAF), experience replay, and nearest-class-mean inference.

Subpackage map:

- ``stream``      stage schedules and the one-epoch data stream
- ``memory``      reservoir-sampled replay memory
- ``augment``     deterministic strong augmentations, random view pipelines
- ``network``     encoder / projector / predictor / growable classifier
- ``objectives``  training losses (stop-gradient view loss, WABS cross-entropy,
                  supervised contrastive)
- ``ncm``         nearest-class-mean inference (Mahalanobis or Euclidean)
- ``metrics``     continual-learning evaluation metrics
- ``synth``       synthetic desk-scale datasets for CPU-sized experiments
- ``harness``     end-to-end experiment loop and persistence
- ``report``      tables and plots from persisted runs
"""

from sdaf.errors import ConfigError

__all__ = ["ConfigError"]
__version__ = "0.1.0"
