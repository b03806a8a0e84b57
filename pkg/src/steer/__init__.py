"""Fleet steering service: datastreams, metrics, policies, and policy-waits."""

__version__ = "0.1.0"
