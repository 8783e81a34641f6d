"""Correlated-noise differentially private decentralized SGD.

Modules:

* ``graph``: topologies, Metropolis-Hastings mixing weights, Laplacians.
* ``covariance``: noise covariance structures, factors and shared-seed draws.
* ``privacy``: budget-to-constraint conversion and the (epsilon, delta) accountant.
* ``optimizer``: log-barrier design of the noise covariance, KKT checks.
* ``engine``: the synchronous noisy gossip simulation and its probes.
* ``tasks``: quadratic and logistic objectives, LIBSVM I/O, partitioning.
* ``cli``: the ``corrnoise`` command line harness.
"""

__version__ = "0.1.0"
