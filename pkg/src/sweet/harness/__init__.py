"""Batch driver: instance generation, end-to-end runs, exact audits and reports."""
