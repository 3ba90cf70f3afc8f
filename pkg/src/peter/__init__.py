"""PETER: from a user and an item, generate an explanation, rank context words and predict a rating.

Everything runs on the small numpy reverse-mode engine in :mod:`peter.autodiff`.
"""

__version__ = "0.1.0"
