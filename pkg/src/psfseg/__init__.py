"""Point-cloud part segmentation from scratch on numpy.

Modules: ``tensor`` (autograd core), ``data``, ``trees``, ``pdnet``,
``sparse``, ``pointconv``, ``blocks``, ``hgrid``, ``metrics``, ``config``,
``harness`` and ``cli``.
"""

__version__ = "0.1.0"
