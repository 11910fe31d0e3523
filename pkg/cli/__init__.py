"""Command-line entry point for the splat overfitting lab."""
