"""CLI, configuration, presets and artifact writers."""
