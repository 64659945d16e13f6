"""Data, training, caching, cascade, evaluation and the command line."""
