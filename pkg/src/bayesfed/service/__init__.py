"""HTTP service wrapping the simulator for long-running background runs."""
