"""Trusted-application rehosting sandbox.

Loads TAELF-packaged trusted applications into a deterministic emulator
core, intercepts their API calls at the import layer, and layers fuzzing,
debugging, and reachability-based API ranking on top.
"""

__version__ = "0.1.0"
