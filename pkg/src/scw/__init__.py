"""Secure workflow middleware.

Encrypted workflow bundles, AES-XTS data images, a leasing key service, a
capability-aware scheduler with worker agents, tiered encrypted storage and a
benchmark harness measuring what the encryption costs.
"""

from __future__ import annotations

__version__ = "0.1.0"
