"""
NIfTI / gradient table I/O and in-silico data
"""
