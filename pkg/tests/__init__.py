"""Test suite for pidsbench."""
