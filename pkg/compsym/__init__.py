"""
compsym - compositional symbolic control of switched systems.

This package abstracts networks of switched affine subsystems into finite
transition systems, certifies the abstractions with alternating simulation
functions, composes them under a small-gain condition and synthesizes
safety controllers that refine to the concrete network.
"""

from compsym.session import Session

__version__ = '0.1.0'


def session(seed=0, workers=1):
    """
    Create a session.

    Parameters
    ----------
    seed : int
        Seed of the session's random generator.
    workers : int
        Threads for table building and synthesis.

    Returns
    -------
    compsym.session.Session
        A new session.
    """
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    return Session(seed=seed, workers=workers)
