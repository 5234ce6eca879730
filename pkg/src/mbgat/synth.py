"""Synthetic funnel data with planted user-item group structure.

Users and items are split into matching groups; each user prefers a sample
of items from their own group. Preferred pairs pass through a view -> cart ->
buy funnel with conditional probabilities, so per user the buy count never
exceeds the cart count, which never exceeds the view count. Timestamps are
drawn per pair and increase along the funnel.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import DataError, Interaction


@dataclass
class SynthConfig:
    num_users: int = 200
    num_items: int = 100
    num_groups: int = 10
    prefs_per_user: int = 12
    p_view: float = 0.9
    p_cart: float = 0.5
    p_buy: float = 0.25
    time_range: int = 1000
    behaviors: tuple[str, ...] = ("view", "cart", "buy")
    seed: int = 0

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise DataError("num_users and num_items must be positive")
        if self.num_groups < 1 or self.num_groups > min(self.num_users, self.num_items):
            raise DataError(
                f"num_groups must be in [1, min(users, items)], got {self.num_groups}"
            )
        for name, p in (("p_view", self.p_view), ("p_cart", self.p_cart), ("p_buy", self.p_buy)):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must be a probability, got {p}")
        if len(self.behaviors) != 3:
            raise DataError("the funnel needs exactly three behaviors (view, cart, buy order)")
        if self.time_range < 3:
            raise DataError("time_range must leave room for the funnel offsets")


def generate_funnel(config: SynthConfig) -> list[Interaction]:
    """Draw the interaction log; behavior ids follow config.behaviors order."""
    rng = np.random.default_rng(config.seed)
    group_of_item = np.arange(config.num_items) % config.num_groups
    items_by_group = [np.nonzero(group_of_item == g)[0] for g in range(config.num_groups)]
    out: list[Interaction] = []
    for u in range(config.num_users):
        g = u % config.num_groups
        pool = items_by_group[g]
        k = min(config.prefs_per_user, len(pool))
        prefs = rng.choice(pool, size=k, replace=False)
        for i in np.sort(prefs):
            t0 = int(rng.integers(0, config.time_range - 2))
            if rng.random() >= config.p_view:
                continue
            out.append(Interaction(u, int(i), 0, t0))
            if rng.random() >= config.p_cart:
                continue
            out.append(Interaction(u, int(i), 1, t0 + 1))
            if rng.random() >= config.p_buy:
                continue
            out.append(Interaction(u, int(i), 2, t0 + 2))
    return out


def funnel_kg_triples(config: SynthConfig) -> list[tuple[int, str, str]]:
    """(item, in_group, group token) rows matching the planted structure."""
    return [(i, "in_group", f"group_{i % config.num_groups}") for i in range(config.num_items)]
