"""Services module for the splat lab: rendering, training, diagnostics and statistics."""
