"""Loss reweighting, mixture-of-experts restoration and retrieval tooling for rain removal at toy scale."""

__version__ = "0.1.0"
