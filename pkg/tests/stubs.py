"""Stand-in models that only implement ``episode_logits``."""

import numpy as np


class OracleModel:
    """Scores the true class highest (``sign=-1`` scores it lowest)."""

    def __init__(self, sign=1.0):
        self.sign = sign

    def episode_logits(self, ep):
        return self.sign * np.eye(ep.n_way)[ep.query_labels]


class FrozenRandomModel:
    """Logits from a fixed random projection of the query pixels; supports are ignored.

    Since the supports never enter, predictions are independent of the episode
    labels and per-episode accuracy is roughly Binomial(M, 1/N) / M.
    """

    def __init__(self, shape, n_way, seed=0):
        self.w = np.random.default_rng(seed).standard_normal((int(np.prod(shape)), n_way))

    def episode_logits(self, ep):
        return ep.query.reshape(len(ep.query), -1) @ self.w
