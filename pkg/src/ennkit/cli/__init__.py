"""Command-line front end: config parsing, orchestration, plotting."""
