"""Loopback-only simulator and measurement harness for browser-resident
distributed computation: servant/puppeteer protocol, calibrated workloads,
a population-scale discrete-event simulator, and detection/policy defenses.
"""

__version__ = "0.1.0"
