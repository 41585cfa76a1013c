"""dispatchlab: dynamic job-shop simulation, dispatching-rule language and
GP-based rule evolution."""

__version__ = "0.1.0"
