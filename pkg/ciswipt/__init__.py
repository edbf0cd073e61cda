"""Constructive-interference precoding for SWIPT in the MISO downlink."""
