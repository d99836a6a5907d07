"""Parameterizations, the augmented filter, its two gradient modes and the dense oracle"""
