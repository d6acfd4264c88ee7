"""Tests for tempomesh."""
