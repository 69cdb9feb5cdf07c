"""Port-call sequence forecasting from AIS tracks.

Retrieval-enhanced encoder-decoder whose output is restricted to ports that
the maritime network can reach in the required number of legs.
"""

__version__ = "0.1.0"
