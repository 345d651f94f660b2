"""Reference applications, addressable by ``family.role`` names."""

from . import eventfilter, particles, wordcount
from .base import AppRole, RankContext

APPS: dict[str, AppRole] = {r.name: r for mod in (wordcount, particles, eventfilter) for r in mod.ROLES}

__all__ = ["APPS", "AppRole", "RankContext"]
