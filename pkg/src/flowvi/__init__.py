"""Samplers over pointed DAGs trained with flow-balance and variational
objectives, with exact small-instance verification of their gradient
identities."""

__version__ = "0.1.0"
