"""Tests for the fedreg package."""
