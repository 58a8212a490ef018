"""Test suite for agscl."""
