"""Command-line surface: ``python -m autood <subcommand>``."""
