"""Tests for the CI-SWIPT precoder library."""
