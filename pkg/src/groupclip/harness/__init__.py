"""Configuration, data, telemetry, benchmarks and the command-line interface."""
