"""Training-free instance and class attention control on toy denoisers."""
