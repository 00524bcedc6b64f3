"""maskbox: desk-scale unified box + mask set prediction.

A small, fully self-verifying stack: a numpy autodiff engine, box/mask
geometry, set-prediction losses and exact bipartite matching, query
denoising, an anchor-guided encoder/decoder model, a synthetic scene
generator, and AP/PQ/mIoU metrics, plus a CLI that trains and evaluates
the whole thing on a laptop CPU.
"""

__version__ = "0.1.0"
