"""Command-line harness: configuration, training loops and experiment runners."""
