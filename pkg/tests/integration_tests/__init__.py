"""End-to-end runs of the CLI stages and the pipeline graph."""
