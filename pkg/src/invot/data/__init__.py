"""Bundled example inputs: migration table, graph edge lists."""

from importlib import resources


def path(name):
    return resources.files(__name__).joinpath(name)
