"""fedmark: a desk-scale simulator for three-stage multi-modal federated
learning on home sensor nodes, with edge-system dynamics and an
activity-biomarker statistics pipeline."""

__version__ = "0.1.0"
