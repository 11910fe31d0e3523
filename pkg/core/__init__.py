"""Core module for the splat overfitting lab: settings, logging, metrics, errors."""
