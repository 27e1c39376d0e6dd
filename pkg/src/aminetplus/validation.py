"""Input checks for the estimator wrapper."""

import numpy as np

from .bagdata import PAD_TOKEN, Bag
from .errors import DataError


def check_bags(X, name="X") -> list:
    """Return ``X`` as a list of token tuples.

    Each element must be a non-empty sequence of strings.  A bare string is
    rejected since iterating it would give characters, not tokens.
    """
    if isinstance(X, (str, bytes)):
        raise DataError(f"{name} must be a sequence of bags, got a string")
    try:
        bags = list(X)
    except TypeError:
        raise DataError(f"{name} must be a sequence of bags, got {type(X).__name__}") from None
    if not bags:
        raise DataError(f"{name} holds no bags")
    out = []
    for i, bag in enumerate(bags):
        if isinstance(bag, Bag):
            out.append(bag.tokens)
            continue
        if isinstance(bag, (str, bytes)):
            raise DataError(f"{name}[{i}] is a string; expected a sequence of tokens")
        tokens = tuple(bag)
        if not tokens:
            raise DataError(f"{name}[{i}] has no instances")
        bad = [t for t in tokens if not isinstance(t, str) or t == PAD_TOKEN]
        if bad:
            raise DataError(f"{name}[{i}] holds invalid token {bad[0]!r}")
        out.append(tokens)
    return out


def check_labels(y, n_samples: int, name="y"):
    """Binary targets as ``(classes, encoded 0/1 array)``."""
    y = np.asarray(y)
    if y.ndim != 1:
        y = y.reshape(-1) if y.ndim == 2 and y.shape[1] == 1 else y
    if y.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {y.shape}")
    if len(y) != n_samples:
        raise DataError(f"{name} has {len(y)} labels for {n_samples} bags")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) != 2:
        raise DataError(f"{name} must hold exactly two classes, found {len(classes)}")
    return classes, encoded.astype(np.int64)
