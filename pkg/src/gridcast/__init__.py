"""gridcast: next-step power-system state forecasting on the bus graph."""

__version__ = "0.1.0"
