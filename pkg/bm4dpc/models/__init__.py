"""
Domain types, configuration and denoising models
"""
