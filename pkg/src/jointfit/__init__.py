"""Semiparametric joint models of longitudinal and survival data."""
