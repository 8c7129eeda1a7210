"""Backoff policy for waiting on another process's cache commit."""

import logging
import time
from dataclasses import dataclass
from typing import Callable

logger = logging.getLogger(__name__)

MAX_BACKOFF_SECONDS = 2.0


@dataclass
class WaitPolicy:
    base_seconds: float = 0.05
    max_wait_seconds: float = 60.0


def compute_backoff(attempt_count: int, base_seconds: float = 0.05) -> float:
    """Exponential backoff: min(base * 2^(n-1), MAX_BACKOFF_SECONDS) seconds."""
    return min(base_seconds * (2 ** (attempt_count - 1)), MAX_BACKOFF_SECONDS)


def wait_until(
    predicate: Callable[[], bool],
    policy: WaitPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> bool:
    """Poll predicate with backoff; return False once max_wait_seconds is spent."""
    policy = policy or WaitPolicy()
    waited = 0.0
    attempt = 0
    while not predicate():
        if waited >= policy.max_wait_seconds:
            return False
        attempt += 1
        delay = compute_backoff(attempt, policy.base_seconds)
        logger.debug("Waiting %.2fs (attempt %d)", delay, attempt)
        sleep(delay)
        waited += delay
    return True
