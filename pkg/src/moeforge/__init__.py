"""moeforge: a desk-scale laboratory for sparsely gated MoE training.

Subpackages and modules:

- ndcore      tensor engine (autodiff, Adam, losses, checkpoints)
- routing     MoE gating, dispatch, capacity, EOM/FOM/gating-dropout
- cmr         conditional MoE routing (learned dense/MoE blend)
- model       toy transformer encoder-decoder with MoE sublayers
- corpus      synthetic imbalanced multitask corpus generator
- curriculum  count-based and step-based curriculum planning
- trainer     training loop, evaluation, CSV logging
- analysis    routing statistics: usage, E50%, co-location, similarity
- cli         `moeforge gen | train | curriculum | analyze`
"""

__version__ = "0.1.0"
