"""Conditional particle filters with bridge backward sampling."""
