"""
BM4D-PC - denoising of diffusion MRI with spatially varying and correlated noise
"""
