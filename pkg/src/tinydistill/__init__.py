"""In-situ distillation of tiny CNNs from a weight-sharing widened teacher.

Modules: ``autodiff`` (reverse-mode tensors), ``nn`` (layers and networks),
``supernet`` (shared teacher/student parameters), ``distill`` (losses and
gradient surgery), ``train`` (loops), ``data`` (IDX and synthetic data),
``checkpoint`` (JSON checkpoints) and ``cli``.
"""

__version__ = "0.1.0"
