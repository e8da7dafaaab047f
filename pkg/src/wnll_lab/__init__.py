"""Desk-scale adversarial attack/defense lab around a WNLL interpolating head."""
