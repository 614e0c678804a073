"""Retry helper for stochastic steps that can land on a rejected point."""

from __future__ import annotations

import logging
from typing import Callable, TypeVar

import numpy as np

from app.errors import FitFailure

logger = logging.getLogger(__name__)

T = TypeVar("T")


class Rejected(Exception):
    """Attempt produced a non-finite value; a fresh draw may succeed."""


def retry_with_redraw(
    fn: Callable[[np.random.Generator, int], T],
    rng: np.random.Generator,
    max_retries: int = 100,
    operation: str = "",
) -> T:
    """Call fn(rng, attempt) until it stops raising Rejected.

    Any other exception propagates immediately. After max_retries rejected
    attempts a FitFailure is raised with the last rejection reason.
    """
    last: Exception | None = None
    op_str = f" [{operation}]" if operation else ""
    for attempt in range(max_retries):
        try:
            return fn(rng, attempt)
        except Rejected as e:
            last = e
            if attempt in (0, 9, 49):
                logger.warning(f"Attempt {attempt + 1}/{max_retries}{op_str} rejected: {e}. Redrawing...")
    raise FitFailure(
        f"{operation or 'operation'} rejected after {max_retries} attempts: {last}",
        diagnostics={"attempts": max_retries, "last_reason": str(last)},
    )
