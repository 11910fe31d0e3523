"""Models module for the splat overfitting lab."""
