"""
Metrics, previews, benchmark and parallel helpers
"""
