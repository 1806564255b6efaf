import logging
import numpy as np

logger = logging.getLogger(__name__)


def resolve_seed(seed: int | None) -> int:
    """
    Return `seed` unchanged, or draw one from OS entropy and log it so the
    run can be reproduced.
    """
    if seed is not None:
        return seed
    drawn = int(np.random.SeedSequence().entropy % (2**32))
    logger.warning(f"No seed given, using random seed {drawn}")
    return drawn


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent generators derived from (seed, index)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
