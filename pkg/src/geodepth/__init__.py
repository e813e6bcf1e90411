"""Self-supervised depth with geometry-aided pose refinement, on numpy.

Modules: ``geometry`` (poses, rotations, projection), ``colmap_io``,
``synth`` (synthetic scenes), ``depth_field``, ``photometric`` (warps and
losses), ``pose_opt`` (pair alignment), ``isd`` (self-distillation),
``optim``/``train`` (optimisation and ablations), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
