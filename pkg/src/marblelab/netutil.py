"""Shared torch setup for reproducible single-thread CPU runs."""

from __future__ import annotations

import torch

_CONFIGURED = False


def configure_torch() -> None:
    """Pin torch to one deterministic CPU thread.

    Called by every training/planning entry point; repeat calls are
    no-ops.  Single-threaded CPU kernels make runs bit-reproducible for a
    fixed seed, which the reproducibility contract relies on.
    """
    global _CONFIGURED
    if _CONFIGURED:
        return
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    _CONFIGURED = True


def parameter_count(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
