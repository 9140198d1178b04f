"""Multi-view collaborative provenance-graph learning for APT detection."""
