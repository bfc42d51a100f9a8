"""Desk-scale contrastive image-text encoder lab."""
