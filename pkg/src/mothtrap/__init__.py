"""Edge pest-detection toolkit: a small numpy CNN engine, model zoo, graph
optimizations, training, the trap's vision pipeline, an energy model and the
telemetry codec."""

__version__ = "0.1.0"
