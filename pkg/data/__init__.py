"""Longitudinal visit data: records, validation, CSV persistence and padded panels."""
