"""Constant-velocity tracking experiment, Monte-Carlo study and mode benchmark"""
