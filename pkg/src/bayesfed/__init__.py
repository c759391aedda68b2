"""Desk-scale Bayesian federated learning simulator.

Clients sample their posterior with SGLD while distilling the posterior
predictive into a student network; the server aggregates by weighted
averaging or by ensemble distillation. Includes a federated active
learning harness, calibration and OOD metrics, data provisioning, a CLI
and a small HTTP service.
"""

__version__ = "0.1.0"
