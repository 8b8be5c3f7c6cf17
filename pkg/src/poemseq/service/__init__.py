"""HTTP service around the core package."""
