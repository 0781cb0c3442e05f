"""O(3)-equivariant Clifford multivector graph networks.

Subpackages:
    clifford  - exact Cl(R^3) reference algebra and the O(3) action
    autodiff  - minimal reverse-mode array engine and Adam
    layers    - equivariant building blocks (multivector linear maps, MVN, MVP)
    models    - the four message-passing architectures and featurization
    datasets  - N-body simulator, chain-denoise generator, dataset container
    trainer   - training loop, evaluation, equivariance audit, benchmark
    report    - metrics files and figures
    cli       - command-line entry point
"""

__version__ = "0.1.0"
