"""Field-aware Neural Factorization Machine (FNFM) and click-prediction baselines.

Modules:

* :mod:`fnfm.data` -- field schema, hashing, encoding, day splits, dataset caches
* :mod:`fnfm.nn` -- dense, batch-norm and MLP layers with hand-written backward passes
* :mod:`fnfm.interactions` -- FM/FFM pairwise terms, bi-interaction pooling and concatenation
* :mod:`fnfm.models` -- LR, FM, FFM, NFM, DeepFM and FNFM
* :mod:`fnfm.optim` -- Adam and AdaGrad with lazy row-sparse updates
* :mod:`fnfm.metrics` -- log-loss and ROC AUC
* :mod:`fnfm.harness` -- training loop, synthetic data and the experiment studies
* :mod:`fnfm.store` -- binary model files
* :mod:`fnfm.cli` -- the ``fnfm`` command
"""

__version__ = "0.1.0"
