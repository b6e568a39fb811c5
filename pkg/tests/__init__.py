"""Unit test package for pyflowalign."""
