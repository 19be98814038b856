"""Flow-statistics traffic classification with Conv-LSTM networks on a numpy autodiff engine."""

__version__ = "0.1.0"
