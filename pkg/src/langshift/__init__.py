"""Language-vector shifting for multilingual models, at toy scale.

Modules:

- ``numkit``: Jacobi SVD, symmetric eigensolver, Cholesky and SPD pencils.
- ``repstore``: binary containers for activation dumps, corpora and checkpoints.
- ``geometry``: language vectors, subspace distance, shift-area selection, LDA.
- ``toymodel``: synthetic parallel corpus and a small numpy transformer.
- ``intervention``: shift hooks.
- ``training``: losses, gradient checks and the two-stage trainer.
- ``clieval``: evaluation, pipeline commands and the command-line entry point.
"""

__version__ = "0.1.0"
