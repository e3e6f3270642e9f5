"""Multi-step deep BSDE solver for semilinear PIDEs driven by truncated Levy noise.

Modules: ``levy`` (measures, partitions, jump sampling), ``paths`` (forward
Euler scheme), ``nn`` (MLPs and Adam), ``solver`` (the backward training
loop), ``reference`` (regression oracles and experiments) and ``cli``.
Submodules are imported on demand so the command line can set BLAS thread
counts before numpy loads.
"""

__version__ = "0.1.0"
