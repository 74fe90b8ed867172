"""Brute-force neighbouring-dataset enumeration for the clipped statistics."""

import itertools

import numpy as np

from gdpdistill.distill import clipped_feature_sum, clipped_mean_feature
from gdpdistill.generator import clip_norm_rows


def toy_points():
    # five points in the plane, two of them outside the unit ball
    return np.array([[0.3, -0.2], [2.0, 0.0], [-0.5, 0.5], [0.0, -3.0], [0.1, 0.1]])


def candidates(data, bound):
    """Replacement points: a lattice, a circle at radius 1.5 R, and each point's antipode."""
    grid = np.array(list(itertools.product(np.linspace(-2 * bound, 2 * bound, 21), repeat=data.shape[1])))
    angles = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    circle = 1.5 * bound * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    axes = bound * np.vstack([np.eye(data.shape[1]), -np.eye(data.shape[1])])
    antipodes = -data / np.linalg.norm(data, axis=1, keepdims=True) * 2 * bound
    return np.vstack([grid, circle, axes, antipodes])


def replacement_shifts(data, stat, cands):
    """||stat(D) - stat(D')|| over every D' differing from D in one replaced point."""
    base = stat(data)
    out = []
    for i in range(len(data)):
        for c in cands:
            d2 = data.copy()
            d2[i] = c
            out.append(np.linalg.norm(stat(d2) - base))
    return np.array(out)


def add_remove_shifts(data, stat, cands):
    """Shifts over every D' obtained by removing one point or adding one candidate."""
    base = stat(data)
    out = [np.linalg.norm(stat(np.delete(data, i, axis=0)) - base) for i in range(len(data))]
    out += [np.linalg.norm(stat(np.vstack([data, c])) - base) for c in cands]
    return np.array(out)


def clipped_mean(bound):
    return lambda x: clip_norm_rows(x, bound).mean(axis=0)


def clipped_second_moment(bound):
    return lambda x: (clip_norm_rows(x, bound) ** 2).mean(axis=0)


def feature_mean(extractor, clip):
    return lambda x: clipped_mean_feature(extractor, x, clip)


def feature_sum_over(extractor, clip, expected):
    return lambda x: clipped_feature_sum(extractor, x, clip) / expected
