"""Feature-shift attacks on federated graph classification.

Modules: :mod:`autodiff` (reverse-mode tape), :mod:`graphs` (data, TU I/O,
clustering coefficients), :mod:`models` (GCN/GAT), :mod:`attack` (shifter
generator and baselines), :mod:`federation` (rounds and aggregators),
:mod:`experiments` (metrics and drivers), :mod:`cli`.
"""

__version__ = "0.1.0"
