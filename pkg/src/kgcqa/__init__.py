"""Complex query answering workbench over knowledge graphs.

Two-stage pipeline: (1) pretrain a neural link predictor on one-hop triples,
(2) train a distance-biased transformer that encodes an arbitrary EFO-1 query
graph into one (head, relation) pair scored by the frozen link predictor.
Includes the symbolic oracle used for dataset generation and ground truth.
"""

__version__ = "0.1.0"
