"""Desk-scale collaborative intrusion detection: Snort-style sensors on a simulated
LAN, an rsyslog-like pipeline to a central store, and an emulated SIEM."""

__version__ = "0.1.0"
