"""HTTP service: persistence, accounts, pipeline orchestration, API app."""
