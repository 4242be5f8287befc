"""Temporal basis function models for stimulation-response forecasting.

Library layout:

* ``sessiondata``  - recordings, trials, filters, band power, z-scoring, file format
* ``synthgen``     - synthetic sessions with planted state-dependent responses
* ``model``        - TBFM forward paths, descriptors, compilation, serialization
* ``train``        - gradient training (joint and stagewise-additive), optimizer
* ``lssm``         - linear state-space baseline
* ``statedep``     - baseline matching and statistical dependence tests
* ``control``      - closed-loop controller simulations and ROC analysis
* ``metrics``      - R-squared family and sample-efficiency sweeps
* ``bench``        - single-trial latency benchmarks
* ``cli``          - command-line entry point (``tbfm``)
"""

__version__ = "0.1.0"
