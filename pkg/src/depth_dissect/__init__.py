"""Depth-selectivity dissection of small monocular depth networks.

Modules: ``tensor`` (numpy autodiff), ``scenes`` (synthetic RGB-D data),
``bins`` (depth discretization), ``net`` (encoder-decoder model),
``dissect`` (per-unit selectivity), ``train`` (baseline / regularized /
assigned training), ``evaluate`` (metrics, ablation, correction, attacks),
``report`` and ``cli``.
"""

__version__ = "0.1.0"
