"""Desk-scale unified conversational recommender with knowledge-enhanced prompts."""

__version__ = "0.1.0"
