"""Transition-level long-tail next-POI prediction.

The package combines a transformer trajectory backbone with two
transferable transition signals: multi-hop evidence propagated over the
global POI transition graph, and a calibrated revisit prior computed from
each user's own visit history. Training holds out frequently observed
(warm) transitions behind a stop-gradient so the auxiliary objective can
only be satisfied through the transferable signals.
"""

__version__ = "0.1.0"
